/**
 * Image loading: PNG (via pngjs) and PGM (P2/P5), decoded to grayscale
 * floats in [0, 1] and bilinearly resized to the encoder's native
 * input size.
 */

import { PNG } from "pngjs";

export interface GrayImage {
  width: number;
  height: number;
  pixels: Float64Array; // row-major, [0, 1]
}

export function decodeImage(path: string, data: Buffer): GrayImage {
  if (data.length >= 8 && data.readUInt32BE(0) === 0x89504e47) {
    return decodePng(data);
  }
  if (data.length >= 2 && data[0] === 0x50 && (data[1] === 0x32 || data[1] === 0x35)) {
    return decodePgm(data);
  }
  throw new Error(`${path}: unsupported image format (PNG and PGM are handled)`);
}

function decodePng(data: Buffer): GrayImage {
  const png = PNG.sync.read(data);
  const pixels = new Float64Array(png.width * png.height);
  for (let i = 0; i < png.width * png.height; i++) {
    const r = png.data[4 * i];
    const g = png.data[4 * i + 1];
    const b = png.data[4 * i + 2];
    pixels[i] = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
  }
  return { width: png.width, height: png.height, pixels };
}

function decodePgm(data: Buffer): GrayImage {
  const binary = data[1] === 0x35; // P5
  let offset = 2;
  const fields: number[] = [];
  const isSpace = (b: number) => b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
  while (fields.length < 3 && offset < data.length) {
    while (offset < data.length && isSpace(data[offset])) offset++;
    if (data[offset] === 0x23) { // comment line
      while (offset < data.length && data[offset] !== 0x0a) offset++;
      continue;
    }
    let value = 0;
    let any = false;
    while (offset < data.length && data[offset] >= 0x30 && data[offset] <= 0x39) {
      value = value * 10 + (data[offset] - 0x30);
      offset++;
      any = true;
    }
    if (!any) throw new Error("malformed PGM header");
    fields.push(value);
  }
  const [width, height, maxval] = fields;
  if (!width || !height || !maxval) throw new Error("malformed PGM header");
  const pixels = new Float64Array(width * height);
  if (binary) {
    offset++; // single whitespace after maxval
    for (let i = 0; i < width * height; i++) {
      pixels[i] = data[offset + i] / maxval;
    }
  } else {
    const text = data.subarray(offset).toString("ascii").trim().split(/\s+/);
    if (text.length < width * height) throw new Error("truncated PGM data");
    for (let i = 0; i < width * height; i++) {
      pixels[i] = Number(text[i]) / maxval;
    }
  }
  return { width, height, pixels };
}

export function resizeBilinear(image: GrayImage, size: number): Float64Array {
  const out = new Float64Array(size * size);
  const scaleX = image.width / size;
  const scaleY = image.height / size;
  for (let y = 0; y < size; y++) {
    const srcY = Math.min((y + 0.5) * scaleY - 0.5, image.height - 1);
    const y0 = Math.max(Math.floor(srcY), 0);
    const y1 = Math.min(y0 + 1, image.height - 1);
    const wy = srcY - y0;
    for (let x = 0; x < size; x++) {
      const srcX = Math.min((x + 0.5) * scaleX - 0.5, image.width - 1);
      const x0 = Math.max(Math.floor(srcX), 0);
      const x1 = Math.min(x0 + 1, image.width - 1);
      const wx = srcX - x0;
      const top = image.pixels[y0 * image.width + x0] * (1 - wx)
        + image.pixels[y0 * image.width + x1] * wx;
      const bottom = image.pixels[y1 * image.width + x0] * (1 - wx)
        + image.pixels[y1 * image.width + x1] * wx;
      out[y * size + x] = top * (1 - wy) + bottom * wy;
    }
  }
  return out;
}
