"""Microbenchmarks: packed XNOR kernels vs the direct 32-bit convolution, and
end-to-end model latency. Benchmarks only measure; correctness is owned by the
kernel tests, and every timed loop checksums its outputs against an unbenched
run to prove the measurement changed nothing.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import __version__, binary, kernels
from .models import LayerGraph, count_params, memory_bits
from .ops import Conv3dSpec
from .tensor import Rng

KERNELS = ("f32_conv3d", "xnor_conv3d")

# Canonical inner-layer case: the binarized V2 model's second-block expansion
# (8 -> 24 channels pointwise at 6x16x64), plus its depthwise and projection.
CANONICAL_CASES = {
    "biv2.block2.expand": (Conv3dSpec(8, 24, (1, 1, 1)), (8, 8, 6, 16, 64)),
    "biv2.block2.depthwise": (
        Conv3dSpec(24, 24, (3, 3, 3), (2, 2, 2), (1, 1, 1), groups=24),
        (8, 24, 6, 16, 64),
    ),
    "biv2.block2.project": (Conv3dSpec(24, 12, (1, 1, 1)), (8, 24, 3, 8, 32)),
}
PERF_GATE_CASE = "biv2.block2.expand"


@dataclass(frozen=True)
class BenchCase:
    name: str
    spec: Conv3dSpec
    input_shape: tuple[int, int, int, int, int]
    iterations: int = 30
    warmup: int = 5
    seed: int = 1234

    def __post_init__(self):
        if self.iterations < 10:
            raise ValueError(f"iterations must be >= 10, got {self.iterations}")
        if self.input_shape[1] != self.spec.in_channels:
            raise ValueError(
                f"input shape {self.input_shape} does not match spec channels "
                f"{self.spec.in_channels}"
            )


def machine_descriptor(threads: int = 1) -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": threads,
        "build_flags": {"package": __version__},
    }


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def _case_operands(case: BenchCase):
    rng = Rng(case.seed)
    x = binary.sign_binarize(rng.child(1).normal(case.input_shape))
    w = binary.sign_binarize(rng.child(2).normal(case.spec.weight_shape))
    alphas = binary.ChannelScales(
        rng.child(3).uniform((case.spec.out_channels,), 0.5, 1.5)
    )
    return x, w, alphas


def _make_runner(case: BenchCase, kernel: str):
    x, w, alphas = _case_operands(case)
    spec = case.spec
    out_sp = spec.out_spatial(case.input_shape[2:])
    if kernel == "f32_conv3d":
        y = np.empty((case.input_shape[0], spec.out_channels, *out_sp), dtype=np.float32)

        def run():
            kernels.conv3d_direct(x, w, *spec.stride, *spec.padding, spec.groups, y)
            return y * alphas.alpha.reshape(1, -1, 1, 1, 1)

    elif kernel == "xnor_conv3d":
        pw = binary.pack_weight(w)

        def run():
            pa = binary.pack_channels(x, groups=spec.groups)
            return binary.xnor_conv3d(pa, pw, alphas, spec)

    else:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    return run


def bench_kernel(case: BenchCase, kernel: str) -> dict:
    """Median-of-iterations timing after warmup; output checksummed every pass."""
    run = _make_runner(case, kernel)
    reference = run()
    ref_sum = _checksum(reference)
    for _ in range(case.warmup):
        run()
    times = []
    for _ in range(case.iterations):
        t0 = time.perf_counter_ns()
        out = run()
        times.append(time.perf_counter_ns() - t0)
        if _checksum(out) != ref_sum:
            raise AssertionError(f"benchmark altered outputs for {case.name}/{kernel}")
    times_ms = np.array(times, dtype=np.float64) / 1e6
    median = float(np.median(times_ms))
    macs = reference.size * case.spec.group_in * int(np.prod(case.spec.kernel))
    return {
        "case": case.name,
        "kernel": kernel,
        "iterations": case.iterations,
        "warmup": case.warmup,
        "median_ms": median,
        "p10_ms": float(np.percentile(times_ms, 10)),
        "p90_ms": float(np.percentile(times_ms, 90)),
        "ops_per_second": float(macs / (median / 1e3)),
        "speedup_vs_reference": None,
        "checksum": ref_sum,
        "memory_mbits": None,
        "machine": machine_descriptor(),
    }


def bench_compare(case: BenchCase) -> dict:
    """Both kernels on one case; speedup = reference median / candidate median."""
    ref = bench_kernel(case, "f32_conv3d")
    cand = bench_kernel(case, "xnor_conv3d")
    cand["speedup_vs_reference"] = ref["median_ms"] / cand["median_ms"]
    return {"case": case.name, "reference": ref, "candidate": cand,
            "speedup": cand["speedup_vs_reference"]}


def bench_model(graph: LayerGraph, batch_size: int = 8, iterations: int = 30,
                warmup: int = 3, seed: int = 99, use_packed: bool = False) -> dict:
    """End-to-end eval-mode latency per chunk, with the model's memory budget."""
    rng = Rng(seed)
    x = rng.uniform((batch_size, 1, 6, 32, 128))
    logits, _ = graph.forward(x, mode="eval", use_packed=use_packed)
    ref_sum = _checksum(logits)
    for _ in range(warmup):
        graph.forward(x, mode="eval", use_packed=use_packed)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        out, _ = graph.forward(x, mode="eval", use_packed=use_packed)
        times.append(time.perf_counter_ns() - t0)
        if _checksum(out) != ref_sum:
            raise AssertionError("benchmark altered model outputs")
    times_ms = np.array(times, dtype=np.float64) / 1e6
    real, bin_ = count_params(graph)
    median = float(np.median(times_ms))
    return {
        "case": f"model[{graph.meta.get('arch', 'custom')}]",
        "kernel": "model_forward_packed" if use_packed else "model_forward",
        "iterations": iterations,
        "warmup": warmup,
        "median_ms": median,
        "p10_ms": float(np.percentile(times_ms, 10)),
        "p90_ms": float(np.percentile(times_ms, 90)),
        "ops_per_second": float(batch_size / (median / 1e3)),  # chunks per second
        "latency_per_chunk_ms": median / batch_size,
        "speedup_vs_reference": None,
        "checksum": ref_sum,
        "memory_mbits": memory_bits(real, bin_),
        "machine": machine_descriptor(),
    }


def canonical_kernel_suite(iterations: int = 30) -> list[dict]:
    out = []
    for name, (spec, shape) in CANONICAL_CASES.items():
        case = BenchCase(name, spec, shape, iterations=iterations)
        out.append(bench_compare(case))
    return out


def load_schema() -> dict:
    import importlib.resources as res

    with res.files("eegnet3d").joinpath("bench_schema.json").open("r") as fh:
        return json.load(fh)
