/**
 * Encoder implementations behind one interface.
 *
 * The built-in encoders are deterministic seeded projections: the image
 * encoder resizes to its native 32x32 grid and projects the pixels
 * through a weight matrix derived from the encoder id; the text
 * encoder truncates to the token budget and sums per-token pseudo-
 * random directions keyed by token hashes. They need no downloaded
 * weights and are exactly reproducible, which is what the bridge
 * contract requires; a real pretrained encoder drops into the same
 * interface.
 */

import { GrayImage, resizeBilinear } from "./images.js";
import { gaussianStream, hashSeed, l2normalize } from "./rng.js";

export interface ImageEncoder {
  readonly id: string;
  readonly dim: number;
  encodeImage(image: GrayImage): Float32Array;
}

export interface TextEncoder {
  readonly id: string;
  readonly dim: number;
  encodeText(text: string, maxTokens: number): Float32Array;
}

export class ProjectionImageEncoder implements ImageEncoder {
  readonly id: string;
  readonly dim: number;
  readonly inputSize = 32;
  private readonly weights: Float64Array; // (inputSize^2) x dim

  constructor(dim: number, id = "proj-image-v1") {
    this.id = id;
    this.dim = dim;
    const draw = gaussianStream(hashSeed(id, dim));
    const n = this.inputSize * this.inputSize;
    this.weights = new Float64Array(n * dim);
    const scale = 1 / Math.sqrt(n);
    for (let i = 0; i < this.weights.length; i++) {
      this.weights[i] = draw() * scale;
    }
  }

  encodeImage(image: GrayImage): Float32Array {
    const grid = resizeBilinear(image, this.inputSize);
    const out = new Float32Array(this.dim);
    for (let p = 0; p < grid.length; p++) {
      const value = grid[p];
      if (value === 0) continue;
      const row = p * this.dim;
      for (let d = 0; d < this.dim; d++) {
        out[d] += value * this.weights[row + d];
      }
    }
    return l2normalize(out);
  }
}

export class HashTextEncoder implements TextEncoder {
  readonly id: string;
  readonly dim: number;

  constructor(dim: number, id = "hash-text-v1") {
    this.id = id;
    this.dim = dim;
  }

  encodeText(text: string, maxTokens: number): Float32Array {
    const tokens = tokenize(text).slice(0, maxTokens);
    const out = new Float32Array(this.dim);
    if (tokens.length === 0) {
      return out;
    }
    for (const token of tokens) {
      const draw = gaussianStream(hashSeed(this.id, token));
      for (let d = 0; d < this.dim; d++) {
        out[d] += draw();
      }
    }
    for (let d = 0; d < this.dim; d++) {
      out[d] /= Math.sqrt(tokens.length);
    }
    return l2normalize(out);
  }
}

export function tokenize(text: string): string[] {
  return text
    .toLowerCase()
    .split(/[^a-z0-9]+/)
    .filter((token) => token.length > 0);
}

export function makeImageEncoder(id: string, dim: number): ImageEncoder {
  if (id === "proj-image-v1") return new ProjectionImageEncoder(dim, id);
  throw new Error(`unknown image encoder ${JSON.stringify(id)}`);
}

export function makeTextEncoder(id: string, dim: number): TextEncoder {
  if (id === "hash-text-v1") return new HashTextEncoder(dim, id);
  throw new Error(`unknown text encoder ${JSON.stringify(id)}`);
}
