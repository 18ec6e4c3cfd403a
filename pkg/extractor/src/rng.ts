/**
 * Deterministic PRNG for the frozen encoder weights.
 *
 * splitmix64 core over BigInt state; streams are derived from a base
 * seed plus a label hash so every weight tensor gets an independent,
 * reproducible sequence on every platform.
 */

const MASK64 = (1n << 64n) - 1n;

export function fnv1a64(text: string): bigint {
  let h = 0xcbf29ce484222325n;
  for (let i = 0; i < text.length; i++) {
    h ^= BigInt(text.charCodeAt(i));
    h = (h * 0x100000001b3n) & MASK64;
  }
  return h;
}

export class Rng {
  private state: bigint;

  constructor(seed: number | bigint, label = "") {
    this.state = (BigInt(seed) ^ fnv1a64(label)) & MASK64;
  }

  /** next raw 64-bit value */
  private next64(): bigint {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    return z ^ (z >> 31n);
  }

  /** uniform in [0, 1) with 53 bits */
  uniform(): number {
    return Number(this.next64() >> 11n) / 2 ** 53;
  }

  /** standard normal via Box-Muller */
  normal(): number {
    let u = this.uniform();
    if (u === 0) u = Number.MIN_VALUE;
    const v = this.uniform();
    return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
  }

  normals(n: number, scale = 1): Float64Array {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) out[i] = this.normal() * scale;
    return out;
  }
}
