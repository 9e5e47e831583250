/**
 * NTF tensor files: magic "NTF1", u32-LE header length, JSON header
 * {"byte_order": "little", "dtype": "f32", "shape": [...]}, raw little-endian
 * float32 payload. The header string matches the engine's writer byte for
 * byte, so identical tensors produce identical files.
 */

import * as fs from "fs";

export function ntfBytes(data: Float32Array, shape: number[]): Buffer {
  const count = shape.reduce((a, b) => a * b, 1);
  if (data.length !== count) {
    throw new Error(`data length ${data.length} does not match shape [${shape}]`);
  }
  const header = Buffer.from(
    `{"byte_order": "little", "dtype": "f32", "shape": [${shape.join(", ")}]}`,
    "utf-8"
  );
  const out = Buffer.alloc(4 + 4 + header.length + count * 4);
  out.write("NTF1", 0, "ascii");
  out.writeUInt32LE(header.length, 4);
  header.copy(out, 8);
  for (let i = 0; i < count; i++) {
    out.writeFloatLE(data[i], 8 + header.length + i * 4);
  }
  return out;
}

export function writeNtf(path: string, data: Float32Array, shape: number[]): void {
  fs.writeFileSync(path, ntfBytes(data, shape));
}

export function readNtf(path: string): { shape: number[]; data: Float32Array } {
  const buf = fs.readFileSync(path);
  if (buf.subarray(0, 4).toString("ascii") !== "NTF1") {
    throw new Error(`${path} is not an NTF file`);
  }
  const hlen = buf.readUInt32LE(4);
  const header = JSON.parse(buf.subarray(8, 8 + hlen).toString("utf-8"));
  if (header.dtype !== "f32" || header.byte_order !== "little") {
    throw new Error(`unsupported NTF header ${JSON.stringify(header)}`);
  }
  const shape: number[] = header.shape;
  const count = shape.reduce((a: number, b: number) => a * b, 1);
  const payload = buf.subarray(8 + hlen, 8 + hlen + count * 4);
  if (payload.length !== count * 4) {
    throw new Error(`NTF payload truncated: ${payload.length} of ${count * 4} bytes`);
  }
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) data[i] = payload.readFloatLE(i * 4);
  return { shape, data };
}
