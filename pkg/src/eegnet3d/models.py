"""Model assembly: layer graph, executor, V1/V2/V3 builders, parameter accounting.

A LayerGraph is an ordered list of named layers; each layer names its input
activations, so residual adds are plain graph edges. The executor runs layers
in order for the forward pass and composes the hand-written per-layer
backwards in reverse — there is no autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import binary, ops
from .ops import BatchNorm3dState, Conv3dSpec
from .tensor import Rng

INPUT = "input"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs: width factor, expansion, head width, binarization."""

    width_factor: float
    expansion: int
    out_neurons: int
    binary: bool = False
    dropout_rate: float = 0.2
    num_classes: int = 2
    # binarization accuracy-recovery techniques (ignored for full precision)
    real_shortcuts: bool = True
    channel_wise_alpha: bool = True
    last_stage_tuning: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.width_factor <= 0:
            raise ValueError(f"width_factor must be > 0, got {self.width_factor}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.out_neurons < self.num_classes:
            raise ValueError("out_neurons must be >= num_classes")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")


PRESETS: dict[str, ModelConfig] = {
    "v1": ModelConfig(width_factor=0.4, expansion=2, out_neurons=320),
    "v2": ModelConfig(width_factor=0.5, expansion=3, out_neurons=640),
    "v3": ModelConfig(width_factor=0.8, expansion=4, out_neurons=640),
}

INPUT_FRAMES, INPUT_CHANNELS, INPUT_SAMPLES = 6, 32, 128

STEM_BASE = 16          # full-precision stem width before the width factor
STEM_BASE_BINARY = 8    # halved stem for binarized models (last-stage tuning)
BLOCK_BASES = (16, 24, 32)
BLOCK_STRIDES = ((1, 1, 1), (2, 2, 2), (1, 2, 2))
STEM_STRIDE = (1, 2, 2)


def scaled_width(base: int, width_factor: float) -> int:
    """Channel count for a base width: max(4, round-half-up(base * WF))."""
    return max(4, int(base * width_factor + 0.5))


def preset(arch: str, binary_model: bool = False, **overrides) -> ModelConfig:
    cfg = PRESETS[arch.lower()]
    return replace(cfg, binary=binary_model, **overrides)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"

    def __init__(self, name: str, inputs: tuple[str, ...]):
        self.name = name
        self.inputs = inputs
        self.idx = -1  # position in the graph, set on append

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def param_precision(self) -> str:
        return "real"

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, mode, rng):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, name, inputs, spec: Conv3dSpec, weight: np.ndarray):
        super().__init__(name, inputs)
        self.spec = spec
        self.weight = weight

    def params(self):
        return {"weight": self.weight}

    def out_shape(self, in_shapes):
        n, _, d, h, w = in_shapes[0]
        return (n, self.spec.out_channels, *self.spec.out_spatial((d, h, w)))

    def forward(self, xs, mode, rng):
        return ops.conv3d_forward(xs[0], self.weight, self.spec), {"x": xs[0]}

    def backward(self, grad, cache):
        gx, gw = ops.conv3d_backward(grad, cache["x"], self.weight, self.spec)
        return [gx], {"weight": gw}


class BinaryConv3d(Layer):
    """Latent real weight executed as alpha * sign(latent); STE gradient with clip."""

    kind = "binconv3d"

    def __init__(self, name, inputs, spec: Conv3dSpec, latent: np.ndarray, channel_wise: bool):
        super().__init__(name, inputs)
        self.spec = spec
        self.latent = latent
        self.channel_wise = channel_wise
        self.fixed_scales = None  # set when loaded from a deploy checkpoint
        self._packed = None  # (PackedTensor weights, ChannelScales), lazy

    def params(self):
        return {"latent": self.latent}

    def param_precision(self):
        return "binary"

    def out_shape(self, in_shapes):
        n, _, d, h, w = in_shapes[0]
        return (n, self.spec.out_channels, *self.spec.out_spatial((d, h, w)))

    def refresh(self):
        """Drop the packed-weight cache; called after every optimizer step."""
        self._packed = None

    def scales(self) -> binary.ChannelScales:
        if self.fixed_scales is not None:
            return self.fixed_scales
        if self.channel_wise:
            return binary.channel_scales(self.latent)
        a = binary.global_scale(self.latent)
        return binary.ChannelScales(np.full(self.spec.out_channels, a, dtype=np.float32))

    def packed_weight(self):
        if self._packed is None:
            wb = binary.sign_binarize(self.latent.astype(np.float32))
            self._packed = (binary.pack_weight(wb), self.scales())
        return self._packed

    def forward(self, xs, mode, rng):
        x = xs[0]
        wb = binary.sign_binarize(self.latent)
        alpha = self.scales().alpha
        y = ops.conv3d_forward(x, wb, self.spec)
        y = y * alpha.astype(x.dtype).reshape(1, -1, 1, 1, 1)
        return y, {"x": x, "wb": wb, "alpha": alpha}

    def forward_packed(self, xs):
        """Inference via XNOR-popcount; bit-identical to the float +-1 path."""
        pw, sc = self.packed_weight()
        pa = binary.pack_channels(xs[0], groups=self.spec.groups)
        return binary.xnor_conv3d(pa, pw, sc, self.spec)

    def backward(self, grad, cache):
        gx, glatent = binary.binary_conv_backward(
            grad, cache["x"], cache["wb"], cache["alpha"], self.latent, self.spec
        )
        return [gx], {"latent": glatent}


class BatchNorm3d(Layer):
    kind = "batchnorm3d"

    def __init__(self, name, inputs, state: BatchNorm3dState):
        super().__init__(name, inputs)
        self.state = state

    def params(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def forward(self, xs, mode, rng):
        return ops.bn_forward(xs[0], self.state, mode)

    def backward(self, grad, cache):
        gx, dgamma, dbeta = ops.bn_backward(grad, cache, self.state)
        return [gx], {"gamma": dgamma, "beta": dbeta}


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, mode, rng):
        return ops.relu(xs[0]), {"x": xs[0]}

    def backward(self, grad, cache):
        return [ops.relu_backward(grad, cache["x"])], {}


class SignAct(Layer):
    """Activation binarization; backward is the piecewise-polynomial estimator."""

    kind = "sign"

    def forward(self, xs, mode, rng):
        return binary.sign_binarize(xs[0]), {"x": xs[0]}

    def backward(self, grad, cache):
        return [binary.approx_sign_backward(grad, cache["x"])], {}


class AvgPool3d(Layer):
    kind = "avgpool3d"

    def __init__(self, name, inputs, kernel, stride=None):
        super().__init__(name, inputs)
        self.kernel = tuple(kernel)
        self.stride = tuple(stride) if stride is not None else self.kernel

    def out_shape(self, in_shapes):
        n, c, d, h, w = in_shapes[0]
        sp = tuple(
            (s - k) // st + 1 for s, k, st in zip((d, h, w), self.kernel, self.stride)
        )
        return (n, c, *sp)

    def forward(self, xs, mode, rng):
        return ops.avgpool3d(xs[0], self.kernel, self.stride), {"x_shape": xs[0].shape}

    def backward(self, grad, cache):
        return [ops.avgpool3d_backward(grad, cache["x_shape"], self.kernel, self.stride)], {}


class GlobalAvgPool(Layer):
    kind = "gap"

    def out_shape(self, in_shapes):
        n, c = in_shapes[0][:2]
        return (n, c, 1, 1, 1)

    def forward(self, xs, mode, rng):
        return ops.global_avgpool(xs[0]), {"x_shape": xs[0].shape}

    def backward(self, grad, cache):
        return [ops.global_avgpool_backward(grad, cache["x_shape"])], {}


class ChannelTile(Layer):
    """Parameter-free channel adaptation: tile the channel axis and truncate."""

    kind = "channel_tile"

    def __init__(self, name, inputs, target: int):
        super().__init__(name, inputs)
        self.target = target

    def out_shape(self, in_shapes):
        n, _, d, h, w = in_shapes[0]
        return (n, self.target, d, h, w)

    def forward(self, xs, mode, rng):
        cin = xs[0].shape[1]
        idx = np.arange(self.target) % cin
        return np.ascontiguousarray(xs[0][:, idx]), {"cin": cin}

    def backward(self, grad, cache):
        cin = cache["cin"]
        gx = np.zeros((grad.shape[0], cin, *grad.shape[2:]), dtype=grad.dtype)
        for j in range(self.target):
            gx[:, j % cin] += grad[:, j]
        return [gx], {}


class Add(Layer):
    kind = "add"

    def __init__(self, name, inputs):
        super().__init__(name, inputs)
        if len(inputs) != 2:
            raise ValueError("Add takes exactly two inputs")

    def out_shape(self, in_shapes):
        if in_shapes[0] != in_shapes[1]:
            raise ValueError(
                f"{self.name}: shortcut shapes differ {in_shapes[0]} vs {in_shapes[1]}"
            )
        return in_shapes[0]

    def forward(self, xs, mode, rng):
        if xs[0].shape != xs[1].shape:
            raise ValueError(
                f"{self.name}: add shape mismatch {xs[0].shape} vs {xs[1].shape}"
            )
        return xs[0] + xs[1], {}

    def backward(self, grad, cache):
        return [grad, grad], {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, inputs, rate: float):
        super().__init__(name, inputs)
        self.rate = rate

    def forward(self, xs, mode, rng):
        sub = rng.child(self.idx) if (mode == "train" and rng is not None) else None
        if mode == "train" and sub is None and self.rate > 0:
            raise ValueError("train-mode dropout needs an rng")
        y, mask = ops.dropout(xs[0], self.rate, mode if sub is not None else "eval", sub)
        return y, {"mask": mask}

    def backward(self, grad, cache):
        return [ops.dropout_backward(grad, cache["mask"])], {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shapes):
        n = in_shapes[0][0]
        return (n, int(np.prod(in_shapes[0][1:])))

    def forward(self, xs, mode, rng):
        return xs[0].reshape(xs[0].shape[0], -1), {"x_shape": xs[0].shape}

    def backward(self, grad, cache):
        return [grad.reshape(cache["x_shape"])], {}


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, inputs, weight: np.ndarray, bias: np.ndarray):
        super().__init__(name, inputs)
        self.weight = weight
        self.bias = bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shapes):
        return (in_shapes[0][0], self.weight.shape[0])

    def forward(self, xs, mode, rng):
        return ops.linear(xs[0], self.weight, self.bias), {"x": xs[0]}

    def backward(self, grad, cache):
        gx, gw, gb = ops.linear_backward(grad, cache["x"], self.weight)
        return [gx], {"weight": gw, "bias": gb}


# ---------------------------------------------------------------------------
# Graph + executor
# ---------------------------------------------------------------------------

class LayerGraph:
    def __init__(self, meta: dict | None = None):
        self.layers: list[Layer] = []
        self._by_name: dict[str, Layer] = {}
        self.meta = meta or {}

    def add(self, layer: Layer) -> str:
        if layer.name in self._by_name or layer.name == INPUT:
            raise ValueError(f"duplicate layer name {layer.name!r}")
        for src in layer.inputs:
            if src != INPUT and src not in self._by_name:
                raise ValueError(f"{layer.name}: unknown input {src!r}")
        layer.idx = len(self.layers)
        self.layers.append(layer)
        self._by_name[layer.name] = layer
        return layer.name

    def __getitem__(self, name: str) -> Layer:
        return self._by_name[name]

    @property
    def output_name(self) -> str:
        return self.layers[-1].name

    def param_items(self):
        for layer in self.layers:
            for pname, arr in layer.params().items():
                yield layer, pname, arr

    def validate(self, input_shape) -> dict[str, tuple]:
        """Propagate static shapes; raises on any incompatibility."""
        shapes = {INPUT: tuple(input_shape)}
        for layer in self.layers:
            shapes[layer.name] = layer.out_shape([shapes[s] for s in layer.inputs])
        out = shapes[self.output_name]
        if len(out) != 2:
            raise ValueError(f"graph output must be (N, classes), got {out}")
        return shapes

    def forward(self, x: np.ndarray, mode: str = "eval", rng: Rng | None = None,
                use_packed: bool = False):
        """Returns (logits, context-for-backward)."""
        acts: dict[str, np.ndarray] = {INPUT: x}
        caches: dict[str, dict] = {}
        for layer in self.layers:
            xs = [acts[s] for s in layer.inputs]
            if use_packed and isinstance(layer, BinaryConv3d):
                acts[layer.name] = layer.forward_packed(xs)
                caches[layer.name] = {}
            else:
                acts[layer.name], caches[layer.name] = layer.forward(xs, mode, rng)
        return acts[self.output_name], {"acts": acts, "caches": caches}

    def backward(self, grad_out: np.ndarray, ctx) -> dict[tuple[str, str], np.ndarray]:
        """Composes per-layer backwards in reverse; returns parameter gradients."""
        grads: dict[str, np.ndarray] = {self.output_name: grad_out}
        pgrads: dict[tuple[str, str], np.ndarray] = {}
        for layer in reversed(self.layers):
            g = grads.pop(layer.name, None)
            if g is None:
                continue
            gins, pg = layer.backward(g, ctx["caches"][layer.name])
            for src, gi in zip(layer.inputs, gins):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
            for pname, arr in pg.items():
                pgrads[(layer.name, pname)] = arr
        return pgrads

    def predict_proba(self, x: np.ndarray, use_packed: bool = False) -> np.ndarray:
        logits, _ = self.forward(x, mode="eval", use_packed=use_packed)
        return ops.softmax(logits)

    def refresh_binary(self):
        for layer in self.layers:
            if isinstance(layer, BinaryConv3d):
                layer.refresh()

    def cast(self, dtype) -> "LayerGraph":
        """In-place dtype cast of all parameters/buffers (gradient-check helper)."""
        for layer in self.layers:
            for attr in ("weight", "bias", "latent"):
                if hasattr(layer, attr):
                    setattr(layer, attr, getattr(layer, attr).astype(dtype))
            if isinstance(layer, BatchNorm3d):
                st = layer.state
                st.gamma = st.gamma.astype(dtype)
                st.beta = st.beta.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _kaiming(rng: Rng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return rng.normal(shape, 0.0, float(np.sqrt(2.0 / fan_in))).astype(dtype)


class _Builder:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.g = LayerGraph()
        self.rng = Rng(seed)
        self._n_init = 0

    def _next_rng(self) -> Rng:
        self._n_init += 1
        return self.rng.child(self._n_init)

    def conv(self, name, src, spec: Conv3dSpec) -> str:
        w = _kaiming(self._next_rng(), spec.weight_shape, spec.group_in * int(np.prod(spec.kernel)))
        return self.g.add(Conv3d(name, (src,), spec, w))

    def bin_conv(self, name, src, spec: Conv3dSpec) -> str:
        latent = _kaiming(self._next_rng(), spec.weight_shape, spec.group_in * int(np.prod(spec.kernel)))
        latent = binary.clamp_latent(latent)
        return self.g.add(BinaryConv3d(name, (src,), spec, latent, self.cfg.channel_wise_alpha))

    def bn(self, name, src, channels) -> str:
        state = BatchNorm3dState.create(channels, self.cfg.bn_eps, self.cfg.bn_momentum)
        return self.g.add(BatchNorm3d(name, (src,), state))

    def fp_conv_unit(self, prefix, src, spec, with_relu=True) -> str:
        out = self.conv(f"{prefix}.conv", src, spec)
        out = self.bn(f"{prefix}.bn", out, spec.out_channels)
        if with_relu:
            out = self.g.add(ReLU(f"{prefix}.relu", (out,)))
        return out

    def bin_conv_unit(self, prefix, src, spec) -> str:
        out = self.g.add(SignAct(f"{prefix}.sign", (src,)))
        out = self.bin_conv(f"{prefix}.conv", out, spec)
        out = self.bn(f"{prefix}.bn", out, spec.out_channels)
        return out

    def block(self, i: int, src: str, cin: int, cout: int, t: int, stride) -> str:
        """Inverted residual: expand pointwise -> depthwise 3x3x3 -> project pointwise."""
        p = f"b{i}"
        hidden = cin * t
        expand = Conv3dSpec(cin, hidden, (1, 1, 1))
        dw = Conv3dSpec(hidden, hidden, (3, 3, 3), stride, (1, 1, 1), groups=hidden)
        project = Conv3dSpec(hidden, cout, (1, 1, 1))
        if self.cfg.binary:
            out = self.bin_conv_unit(f"{p}.expand", src, expand)
            out = self.bin_conv_unit(f"{p}.dw", out, dw)
            out = self.bin_conv_unit(f"{p}.project", out, project)
        else:
            out = self.fp_conv_unit(f"{p}.expand", src, expand)
            out = self.fp_conv_unit(f"{p}.dw", out, dw)
            out = self.fp_conv_unit(f"{p}.project", out, project, with_relu=False)
        identity_ok = cin == cout and tuple(stride) == (1, 1, 1)
        full_shortcuts = self.cfg.binary and self.cfg.real_shortcuts
        if identity_ok:
            out = self.g.add(Add(f"{p}.add", (out, src)))
        elif full_shortcuts:
            short = src
            if tuple(stride) != (1, 1, 1):
                short = self.g.add(AvgPool3d(f"{p}.short.pool", (short,), stride, stride))
            if cin != cout:
                short = self.g.add(ChannelTile(f"{p}.short.tile", (short,), cout))
            out = self.g.add(Add(f"{p}.add", (out, short)))
        return out


def _build(cfg: ModelConfig, seed: int) -> LayerGraph:
    wf = cfg.width_factor
    stem_base = (
        STEM_BASE_BINARY if (cfg.binary and cfg.last_stage_tuning) else STEM_BASE
    )
    c_stem = scaled_width(stem_base, wf)
    c1, c2, c3 = (scaled_width(b, wf) for b in BLOCK_BASES)

    b = _Builder(cfg, seed)
    stem_spec = Conv3dSpec(1, c_stem, (3, 3, 3), STEM_STRIDE, (1, 1, 1))
    # A binarized model must not feed sign(relu(x)): relu output is never
    # negative, so the first block's activations would binarize to constant +1.
    # Its stem therefore ends at BN and block signs see signed values.
    out = b.fp_conv_unit("stem", INPUT, stem_spec, with_relu=not cfg.binary)
    out = b.block(1, out, c_stem, c1, 1, BLOCK_STRIDES[0])
    out = b.block(2, out, c1, c2, cfg.expansion, BLOCK_STRIDES[1])
    out = b.block(3, out, c2, c3, cfg.expansion, BLOCK_STRIDES[2])

    head_spec = Conv3dSpec(c3, cfg.out_neurons, (1, 1, 1))
    gap_first = cfg.binary and cfg.last_stage_tuning
    if gap_first:
        out = b.g.add(GlobalAvgPool("gap", (out,)))
        out = b.fp_conv_unit("head", out, head_spec)
    else:
        out = b.fp_conv_unit("head", out, head_spec)
        out = b.g.add(GlobalAvgPool("gap", (out,)))
    out = b.g.add(Dropout("dropout", (out,), cfg.dropout_rate))
    out = b.g.add(Flatten("flatten", (out,)))
    fc_w = _kaiming(b._next_rng(), (cfg.num_classes, cfg.out_neurons), cfg.out_neurons)
    fc_b = np.zeros(cfg.num_classes, dtype=np.float32)
    b.g.add(Linear("fc", (out,), fc_w, fc_b))

    b.g.meta = {
        "config": cfg,
        "seed": seed,
        "stem_base": stem_base,
        "block_bases": BLOCK_BASES,
        "channels": (c_stem, c1, c2, c3),
    }
    b.g.validate((1, 1, INPUT_FRAMES, INPUT_CHANNELS, INPUT_SAMPLES))
    return b.g


def build_eegnet(cfg: ModelConfig, seed: int = 0) -> LayerGraph:
    """Full-precision model: stem -> three inverted residual blocks -> head."""
    if cfg.binary:
        raise ValueError("cfg.binary must be False for build_eegnet")
    return _build(cfg, seed)


def build_bi_eegnet(cfg: ModelConfig, seed: int = 0) -> LayerGraph:
    """Binarized model: block convs are binary, stem/head/fc stay full precision."""
    if not cfg.binary:
        cfg = replace(cfg, binary=True)
    return _build(cfg, seed)


def build_model(cfg: ModelConfig, seed: int = 0) -> LayerGraph:
    return _build(cfg, seed)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

def count_params(graph: LayerGraph) -> tuple[int, int]:
    """(real_count, binary_count) of learnable parameters only."""
    real = 0
    bin_ = 0
    for layer, _, arr in graph.param_items():
        if layer.param_precision() == "binary":
            bin_ += arr.size
        else:
            real += arr.size
    return real, bin_


def memory_bits(real_count: int, binary_count: int) -> float:
    """Model size in Mbits: 32 bits per real parameter, 1 bit per binary one."""
    if real_count < 0 or binary_count < 0:
        raise ValueError("parameter counts must be >= 0")
    return (32 * real_count + binary_count) / 1e6


def param_table(graph: LayerGraph) -> list[dict]:
    rows = []
    for layer in graph.layers:
        for pname, arr in layer.params().items():
            rows.append(
                {
                    "layer": layer.name,
                    "kind": layer.kind,
                    "param": pname,
                    "shape": list(arr.shape),
                    "count": int(arr.size),
                    "precision": layer.param_precision(),
                }
            )
    return rows
