/**
 * SEGT tensor files: a one-line JSON header followed by the raw
 * little-endian row-major payload. Round-trips are bit-exact.
 */

export type SegtDtype = "f32" | "f64" | "u8";

export interface SegtTensor {
  dtype: SegtDtype;
  shape: number[];
  /** flat row-major values */
  data: Float64Array | Float32Array | Uint8Array;
}

const MAGIC = "SEGT1";

function product(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function encodeSegt(
  data: Float64Array | Float32Array | Uint8Array,
  shape: number[],
): Buffer {
  const count = product(shape);
  if (data.length !== count) {
    throw new Error(`data length ${data.length} != product of shape ${JSON.stringify(shape)}`);
  }
  let dtype: SegtDtype;
  let width: number;
  if (data instanceof Float64Array) {
    dtype = "f64";
    width = 8;
  } else if (data instanceof Float32Array) {
    dtype = "f32";
    width = 4;
  } else {
    dtype = "u8";
    width = 1;
  }
  const header = Buffer.from(
    JSON.stringify({ magic: MAGIC, dtype, shape }) + "\n",
    "utf-8",
  );
  const payload = Buffer.alloc(count * width);
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  for (let i = 0; i < count; i++) {
    if (dtype === "f64") view.setFloat64(i * 8, data[i], true);
    else if (dtype === "f32") view.setFloat32(i * 4, data[i], true);
    else view.setUint8(i, data[i]);
  }
  return Buffer.concat([header, payload]);
}

export function decodeSegt(raw: Buffer): SegtTensor {
  const newline = raw.indexOf(0x0a);
  if (newline < 0) throw new Error("missing SEGT header terminator");
  const header = JSON.parse(raw.subarray(0, newline).toString("utf-8"));
  if (header.magic !== MAGIC) {
    throw new Error(`bad SEGT magic ${JSON.stringify(header.magic)}`);
  }
  const dtype = header.dtype as SegtDtype;
  const shape = header.shape as number[];
  const count = product(shape);
  const payload = raw.subarray(newline + 1);
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  if (dtype === "f64") {
    if (payload.length !== count * 8) throw new Error("payload size mismatch");
    const data = new Float64Array(count);
    for (let i = 0; i < count; i++) data[i] = view.getFloat64(i * 8, true);
    return { dtype, shape, data };
  }
  if (dtype === "f32") {
    if (payload.length !== count * 4) throw new Error("payload size mismatch");
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) data[i] = view.getFloat32(i * 4, true);
    return { dtype, shape, data };
  }
  if (dtype === "u8") {
    if (payload.length !== count) throw new Error("payload size mismatch");
    return { dtype, shape, data: Uint8Array.from(payload) };
  }
  throw new Error(`unknown SEGT dtype ${JSON.stringify(dtype)}`);
}
