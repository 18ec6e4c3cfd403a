/**
 * Frozen encoders producing the embedding sequences the scorer ingests.
 *
 * The published system runs large pretrained speech/language backbones
 * here. This offline sandbox cannot fetch pretrained weights, so both
 * encoders are deterministic frozen networks with seeded weights that
 * reproduce the exact interface: audio becomes a 1500 x 512 sequence
 * (3000 mel frames, downsampled once), text becomes one 1024-wide state
 * per token. Swapping in real backbone exports only requires emitting
 * the same WQEB files.
 */

import { Rng, fnv1a64 } from "./rng.js";
import { logMelSpectrogram, N_FRAMES, N_MELS } from "./mel.js";

export const AUDIO_WIDTH = 512;
export const TEXT_WIDTH = 1024;
export const AUDIO_POSITIONS = N_FRAMES / 2;

export interface EmbeddingMatrix {
  rows: number;
  cols: number;
  data: Float32Array; // row-major
}

function gelu(x: number): number {
  return 0.5 * x * (1 + Math.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

function sinusoid(pos: number, dim: number, width: number): number {
  const exponent = Math.floor(dim / 2) * 2 / width;
  const angle = pos / 10000 ** exponent;
  return dim % 2 === 0 ? Math.sin(angle) : Math.cos(angle);
}

export class AudioEncoder {
  private readonly w1: Float64Array;   // N_MELS x width
  private readonly b1: Float64Array;
  private readonly mix: Float64Array;  // per-channel temporal kernel, width x 3
  readonly width = AUDIO_WIDTH;

  constructor(seed: number) {
    const rng = new Rng(seed, "audio-encoder");
    this.w1 = rng.normals(N_MELS * this.width, 1 / Math.sqrt(N_MELS));
    this.b1 = rng.normals(this.width, 0.1);
    this.mix = rng.normals(this.width * 3, 0.5);
  }

  /** mono 16 kHz samples -> AUDIO_POSITIONS x width states */
  encode(samples: Float64Array): EmbeddingMatrix {
    const mel = logMelSpectrogram(samples); // N_FRAMES x N_MELS
    const width = this.width;

    // frame-wise projection + GELU
    const proj = new Float64Array(N_FRAMES * width);
    for (let t = 0; t < N_FRAMES; t++) {
      const melOff = t * N_MELS;
      const outOff = t * width;
      for (let c = 0; c < width; c++) {
        let acc = this.b1[c];
        for (let m = 0; m < N_MELS; m++) {
          acc += mel[melOff + m] * this.w1[m * width + c];
        }
        proj[outOff + c] = gelu(acc);
      }
    }

    // stride-2 downsample, positional code, per-channel temporal mixing
    const half = AUDIO_POSITIONS;
    const down = new Float64Array(half * width);
    for (let t = 0; t < half; t++) {
      for (let c = 0; c < width; c++) {
        down[t * width + c] =
          0.5 * (proj[2 * t * width + c] + proj[(2 * t + 1) * width + c]) +
          0.1 * sinusoid(t, c, width);
      }
    }
    const out = new Float32Array(half * width);
    for (let t = 0; t < half; t++) {
      const prev = Math.max(0, t - 1) * width;
      const here = t * width;
      const next = Math.min(half - 1, t + 1) * width;
      for (let c = 0; c < width; c++) {
        const k = c * 3;
        out[here + c] = gelu(
          this.mix[k] * down[prev + c] +
          this.mix[k + 1] * down[here + c] +
          this.mix[k + 2] * down[next + c]);
      }
    }
    return { rows: half, cols: width, data: out };
  }
}

export class TextEncodeError extends Error {}

/** Lowercased word/punctuation split; numbers and words stay whole. */
export function tokenize(prompt: string): string[] {
  const tokens = prompt
    .toLowerCase()
    .replace(/([.,!?;:()"'\/-])/g, " $1 ")
    .split(/\s+/)
    .filter((t) => t.length > 0);
  return tokens;
}

export class TextEncoder {
  private readonly seed: number;
  readonly width = TEXT_WIDTH;

  constructor(seed: number) {
    this.seed = seed;
  }

  /** prompt -> tokens x width hidden states */
  encode(prompt: string): EmbeddingMatrix {
    const tokens = tokenize(prompt);
    if (tokens.length === 0) {
      throw new TextEncodeError("prompt is empty after tokenization");
    }
    const width = this.width;
    const states = new Float64Array(tokens.length * width);
    for (let t = 0; t < tokens.length; t++) {
      const rng = new Rng(BigInt(this.seed) ^ fnv1a64(`token:${tokens[t]}`));
      const emb = rng.normals(width, 1 / Math.sqrt(width) * 8);
      for (let c = 0; c < width; c++) {
        states[t * width + c] = emb[c] + 0.05 * sinusoid(t, c, width);
      }
    }
    // light causal mixing: each state blends the running prefix mean,
    // so repeated tokens in different contexts differ
    const out = new Float32Array(tokens.length * width);
    const prefix = new Float64Array(width);
    for (let t = 0; t < tokens.length; t++) {
      for (let c = 0; c < width; c++) {
        prefix[c] += states[t * width + c];
        const mean = prefix[c] / (t + 1);
        out[t * width + c] = Math.tanh(0.85 * states[t * width + c] + 0.15 * mean);
      }
    }
    return { rows: tokens.length, cols: width, data: out };
  }
}
