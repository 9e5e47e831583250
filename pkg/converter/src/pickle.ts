/**
 * Minimal pickle virtual machine for numpy-bearing archives.
 *
 * Supports the binary opcode subset that numpy dict pickles use across
 * protocols 2-5, including Python-2 style raw byte strings (BINSTRING) and
 * the `_codecs.encode` latin-1 detour Python 3 takes for bytes at protocol 2.
 * Anything outside that subset raises, rather than guessing.
 */

export interface NdDtype {
  code: string; // e.g. "f8", "f4"
  byteOrder: string; // "<", ">", "=", "|"
}

export class NdArrayStub {
  shape: number[] = [];
  dtype: NdDtype | null = null;
  fortranOrder = false;
  data: Uint8Array | null = null;
}

class DtypeStub implements NdDtype {
  byteOrder = "=";
  constructor(public code: string) {}
}

type Marker = { kind: "mark" };
type Global = { kind: "global"; module: string; name: string };

const MARK: Marker = { kind: "mark" };

function latin1Bytes(s: string): Uint8Array {
  const out = new Uint8Array(s.length);
  for (let i = 0; i < s.length; i++) {
    const c = s.charCodeAt(i);
    if (c > 0xff) throw new PickleError(`non-latin1 char ${c} in encoded byte string`);
    out[i] = c;
  }
  return out;
}

export class PickleError extends Error {}

export function pickleLoads(buf: Uint8Array): unknown {
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  let pos = 0;
  const stack: unknown[] = [];
  const memo = new Map<number, unknown>();

  const need = (n: number) => {
    if (pos + n > buf.length) {
      throw new PickleError(`truncated pickle: need ${n} bytes at offset ${pos} of ${buf.length}`);
    }
  };
  const u8 = () => { need(1); return buf[pos++]; };
  const u16 = () => { need(2); const v = view.getUint16(pos, true); pos += 2; return v; };
  const u32 = () => { need(4); const v = view.getUint32(pos, true); pos += 4; return v; };
  const i32 = () => { need(4); const v = view.getInt32(pos, true); pos += 4; return v; };
  const u64 = () => { need(8); const v = view.getBigUint64(pos, true); pos += 8; return Number(v); };
  const bytes = (n: number) => { need(n); const v = buf.subarray(pos, pos + n); pos += n; return v; };
  const utf8 = (n: number) => Buffer.from(bytes(n)).toString("utf-8");
  const line = () => {
    const nl = buf.indexOf(0x0a, pos);
    if (nl < 0) throw new PickleError("truncated pickle: unterminated line");
    const s = Buffer.from(buf.subarray(pos, nl)).toString("latin1");
    pos = nl + 1;
    return s;
  };
  const popMark = (): unknown[] => {
    const idx = stack.lastIndexOf(MARK);
    if (idx < 0) throw new PickleError("no MARK on stack");
    const items = stack.splice(idx + 1);
    stack.pop();
    return items;
  };
  const pop = (): unknown => {
    if (!stack.length) throw new PickleError("pickle stack underflow");
    return stack.pop();
  };

  const applyReduce = (callable: unknown, args: unknown[]): unknown => {
    const g = callable as Global;
    if (!g || g.kind !== "global") throw new PickleError("REDUCE on a non-global callable");
    const key = `${g.module}.${g.name}`;
    if (/^numpy(\.core|\._core)?\.multiarray\._reconstruct$/.test(key) ||
        key === "numpy._core._multiarray_umath._reconstruct") {
      return new NdArrayStub();
    }
    if (/^numpy(\.core|\._core)\.numeric\._frombuffer$/.test(key)) {
      // protocol-5 path: _frombuffer(buffer, dtype, shape, order)
      const arr = new NdArrayStub();
      if (!(args[0] instanceof Uint8Array)) throw new PickleError("_frombuffer without bytes");
      arr.data = args[0];
      arr.dtype = args[1] as NdDtype;
      arr.shape = (args[2] as unknown[]).map((d) => Number(d));
      arr.fortranOrder = String(args[3]) === "F";
      return arr;
    }
    if (key === "numpy.dtype" || key === "numpy.core.multiarray.dtype") {
      return new DtypeStub(String(args[0]));
    }
    if (key === "_codecs.encode") {
      const codec = args.length > 1 ? String(args[1]) : "latin1";
      if (codec !== "latin1" && codec !== "latin-1") {
        throw new PickleError(`unsupported bytes codec ${codec}`);
      }
      return latin1Bytes(String(args[0]));
    }
    throw new PickleError(`unsupported callable ${key}`);
  };

  const applyBuild = (obj: unknown, state: unknown): unknown => {
    if (obj instanceof NdArrayStub) {
      const s = state as unknown[];
      if (!Array.isArray(s) || s.length < 5) throw new PickleError("bad ndarray state");
      obj.shape = (s[1] as unknown[]).map((d) => Number(d));
      obj.dtype = s[2] as NdDtype;
      obj.fortranOrder = Boolean(s[3]);
      const data = s[4];
      if (data instanceof Uint8Array) obj.data = data;
      else if (typeof data === "string") obj.data = latin1Bytes(data);
      else throw new PickleError("ndarray data is neither bytes nor a byte string");
      return obj;
    }
    if (obj instanceof DtypeStub) {
      const s = state as unknown[];
      if (Array.isArray(s) && s.length >= 2) obj.byteOrder = String(s[1]);
      return obj;
    }
    throw new PickleError("BUILD on an unsupported object");
  };

  for (;;) {
    const op = u8();
    switch (op) {
      case 0x80: u8(); break;                        // PROTO
      case 0x95: u64(); break;                       // FRAME (length ignored)
      case 0x28: stack.push(MARK); break;            // MARK
      case 0x7d: stack.push(new Map()); break;       // EMPTY_DICT
      case 0x5d: stack.push([]); break;              // EMPTY_LIST
      case 0x29: stack.push([]); break;              // EMPTY_TUPLE
      case 0x4e: stack.push(null); break;            // NONE
      case 0x88: stack.push(true); break;            // NEWTRUE
      case 0x89: stack.push(false); break;           // NEWFALSE
      case 0x4a: stack.push(i32()); break;           // BININT
      case 0x4b: stack.push(u8()); break;            // BININT1
      case 0x4d: stack.push(u16()); break;           // BININT2
      case 0x8a: {                                   // LONG1
        const n = u8();
        const b = bytes(n);
        let v = 0n;
        for (let i = n - 1; i >= 0; i--) v = (v << 8n) | BigInt(b[i]);
        if (n > 0 && b[n - 1] & 0x80) v -= 1n << BigInt(8 * n);
        stack.push(Number(v));
        break;
      }
      case 0x47: {                                   // BINFLOAT (big-endian)
        need(8);
        stack.push(view.getFloat64(pos, false));
        pos += 8;
        break;
      }
      case 0x55: stack.push(Buffer.from(bytes(u8())).toString("latin1")); break;   // SHORT_BINSTRING
      case 0x54: stack.push(Buffer.from(bytes(u32())).toString("latin1")); break;  // BINSTRING
      case 0x8c: stack.push(utf8(u8())); break;      // SHORT_BINUNICODE
      case 0x58: stack.push(utf8(u32())); break;     // BINUNICODE
      case 0x8d: stack.push(utf8(u64())); break;     // BINUNICODE8
      case 0x43: stack.push(bytes(u8()).slice()); break;   // SHORT_BINBYTES
      case 0x42: stack.push(bytes(u32()).slice()); break;  // BINBYTES
      case 0x8e: stack.push(bytes(u64()).slice()); break;  // BINBYTES8
      case 0x96: stack.push(bytes(u64()).slice()); break;  // BYTEARRAY8
      case 0x63: stack.push({ kind: "global", module: line(), name: line() } as Global); break; // GLOBAL
      case 0x93: {                                   // STACK_GLOBAL
        const name = String(pop());
        const module = String(pop());
        stack.push({ kind: "global", module, name } as Global);
        break;
      }
      case 0x71: memo.set(u8(), stack[stack.length - 1]); break;   // BINPUT
      case 0x72: memo.set(u32(), stack[stack.length - 1]); break;  // LONG_BINPUT
      case 0x94: memo.set(memo.size, stack[stack.length - 1]); break; // MEMOIZE
      case 0x68: {                                   // BINGET
        const k = u8();
        if (!memo.has(k)) throw new PickleError(`memo miss ${k}`);
        stack.push(memo.get(k));
        break;
      }
      case 0x6a: {                                   // LONG_BINGET
        const k = u32();
        if (!memo.has(k)) throw new PickleError(`memo miss ${k}`);
        stack.push(memo.get(k));
        break;
      }
      case 0x85: { const a = pop(); stack.push([a]); break; }                       // TUPLE1
      case 0x86: { const b = pop(); const a = pop(); stack.push([a, b]); break; }   // TUPLE2
      case 0x87: { const c = pop(); const b = pop(); const a = pop(); stack.push([a, b, c]); break; } // TUPLE3
      case 0x74: stack.push(popMark()); break;       // TUPLE
      case 0x52: { const args = pop() as unknown[]; stack.push(applyReduce(pop(), args)); break; } // REDUCE
      case 0x62: { const state = pop(); stack.push(applyBuild(pop(), state)); break; }             // BUILD
      case 0x73: {                                   // SETITEM
        const v = pop();
        const k = pop();
        const d = stack[stack.length - 1];
        if (!(d instanceof Map)) throw new PickleError("SETITEM on non-dict");
        d.set(k, v);
        break;
      }
      case 0x75: {                                   // SETITEMS
        const items = popMark();
        const d = stack[stack.length - 1];
        if (!(d instanceof Map)) throw new PickleError("SETITEMS on non-dict");
        for (let i = 0; i < items.length; i += 2) d.set(items[i], items[i + 1]);
        break;
      }
      case 0x61: {                                   // APPEND
        const v = pop();
        const l = stack[stack.length - 1];
        if (!Array.isArray(l)) throw new PickleError("APPEND on non-list");
        l.push(v);
        break;
      }
      case 0x65: {                                   // APPENDS
        const items = popMark();
        const l = stack[stack.length - 1];
        if (!Array.isArray(l)) throw new PickleError("APPENDS on non-list");
        l.push(...items);
        break;
      }
      case 0x30: pop(); break;                       // POP
      case 0x2e: {                                   // STOP
        const result = pop();
        return result;
      }
      default:
        throw new PickleError(`unsupported pickle opcode 0x${op.toString(16)} at offset ${pos - 1}`);
    }
  }
}

/** Decode an NdArrayStub's payload as float64 values (handles f4/f8, both byte orders). */
export function ndarrayToFloat64(arr: NdArrayStub): Float64Array {
  if (!arr.dtype || !arr.data) throw new PickleError("ndarray missing dtype or data");
  if (arr.fortranOrder) throw new PickleError("Fortran-order arrays are not supported");
  const count = arr.shape.reduce((a, b) => a * b, 1);
  const { code, byteOrder } = arr.dtype;
  const little = byteOrder === "<" || byteOrder === "=" || byteOrder === "|";
  const bytesPer = code === "f8" ? 8 : code === "f4" ? 4 : 0;
  if (!bytesPer) throw new PickleError(`unsupported dtype ${code}; expected f4 or f8`);
  if (arr.data.length !== count * bytesPer) {
    throw new PickleError(
      `ndarray payload is ${arr.data.length} bytes, expected ${count * bytesPer}`
    );
  }
  const view = new DataView(arr.data.buffer, arr.data.byteOffset, arr.data.byteLength);
  const out = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = bytesPer === 8 ? view.getFloat64(i * 8, little) : view.getFloat32(i * 4, little);
  }
  return out;
}
