import { readFileSync } from "node:fs";

export type Dtype = "F32" | "F16" | "BF16";

export interface TensorInfo {
  dtype: Dtype;
  shape: number[];
  /** Decoded values, row-major, widened to float64. */
  values: Float64Array;
}

export type Checkpoint = Map<string, TensorInfo>;

const DTYPE_BYTES: Record<Dtype, number> = { F32: 4, F16: 2, BF16: 2 };

function f16ToNumber(bits: number): number {
  const sign = bits & 0x8000 ? -1 : 1;
  const exp = (bits >> 10) & 0x1f;
  const frac = bits & 0x3ff;
  if (exp === 0) return sign * frac * 2 ** -24;
  if (exp === 0x1f) return frac ? NaN : sign * Infinity;
  return sign * (1 + frac / 1024) * 2 ** (exp - 15);
}

function decodePayload(dtype: Dtype, bytes: Uint8Array): Float64Array {
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const n = bytes.byteLength / DTYPE_BYTES[dtype];
  const out = new Float64Array(n);
  if (dtype === "F32") {
    for (let i = 0; i < n; i++) out[i] = view.getFloat32(4 * i, true);
  } else if (dtype === "F16") {
    for (let i = 0; i < n; i++) out[i] = f16ToNumber(view.getUint16(2 * i, true));
  } else {
    // bf16 is the top half of an f32
    const scratch = new DataView(new ArrayBuffer(4));
    for (let i = 0; i < n; i++) {
      scratch.setUint32(0, view.getUint16(2 * i, true) << 16, false);
      out[i] = scratch.getFloat32(0, false);
    }
  }
  return out;
}

export class SafetensorsError extends Error {
  override name = "SafetensorsError";
}

/** Parse a safetensors file: 8-byte LE header length, JSON header, raw payloads. */
export function loadCheckpoint(path: string): Checkpoint {
  const buf = readFileSync(path);
  if (buf.length < 8) throw new SafetensorsError(`${path}: truncated (no header length)`);
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) {
    throw new SafetensorsError(`${path}: header length ${headerLen} exceeds file size`);
  }
  let header: Record<string, unknown>;
  try {
    header = JSON.parse(buf.subarray(8, 8 + headerLen).toString("utf-8"));
  } catch (err) {
    throw new SafetensorsError(`${path}: header is not valid JSON: ${err}`);
  }
  const payload = buf.subarray(8 + headerLen);
  const ckpt: Checkpoint = new Map();
  for (const [name, raw] of Object.entries(header)) {
    if (name === "__metadata__") continue;
    const entry = raw as { dtype: string; shape: number[]; data_offsets: [number, number] };
    const dtype = entry.dtype as Dtype;
    if (!(dtype in DTYPE_BYTES)) {
      throw new SafetensorsError(`${path}: tensor "${name}" has unsupported dtype ${entry.dtype}`);
    }
    const [start, end] = entry.data_offsets;
    const count = entry.shape.reduce((a, b) => a * b, 1);
    if (end - start !== count * DTYPE_BYTES[dtype]) {
      throw new SafetensorsError(
        `${path}: tensor "${name}" payload is ${end - start} bytes, expected ${count * DTYPE_BYTES[dtype]}`
      );
    }
    if (end > payload.length) {
      throw new SafetensorsError(`${path}: tensor "${name}" extends past end of file`);
    }
    ckpt.set(name, {
      dtype,
      shape: [...entry.shape],
      values: decodePayload(dtype, payload.subarray(start, end)),
    });
  }
  return ckpt;
}
