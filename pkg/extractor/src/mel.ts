/**
 * Log-mel spectrogram front end at 16 kHz.
 *
 * Hann-windowed frames (512-point FFT, hop 160), an 80-band triangular
 * mel filterbank over 0..8 kHz, log10 compression clamped to 8 decades
 * below the clip maximum, and the usual (x + 4) / 4 normalization.
 * Output is padded or truncated to exactly 3000 frames (30 s).
 */

export const N_FFT = 512;
export const HOP = 160;
export const N_MELS = 80;
export const N_FRAMES = 3000;
export const SAMPLE_RATE = 16000;

const N_BINS = N_FFT / 2 + 1;

// precomputed tables for the fixed 512-point FFT
const BITREV = (() => {
  const bits = Math.log2(N_FFT);
  const rev = new Int32Array(N_FFT);
  for (let i = 0; i < N_FFT; i++) {
    let r = 0;
    for (let b = 0; b < bits; b++) r |= ((i >> b) & 1) << (bits - 1 - b);
    rev[i] = r;
  }
  return rev;
})();

const TWIDDLE_RE = new Float64Array(N_FFT / 2);
const TWIDDLE_IM = new Float64Array(N_FFT / 2);
for (let i = 0; i < N_FFT / 2; i++) {
  TWIDDLE_RE[i] = Math.cos(-2 * Math.PI * i / N_FFT);
  TWIDDLE_IM[i] = Math.sin(-2 * Math.PI * i / N_FFT);
}

/** In-place iterative radix-2 FFT over interleaved re/im arrays. */
export function fft512(re: Float64Array, im: Float64Array): void {
  for (let i = 0; i < N_FFT; i++) {
    const j = BITREV[i];
    if (j > i) {
      [re[i], re[j]] = [re[j], re[i]];
      [im[i], im[j]] = [im[j], im[i]];
    }
  }
  for (let size = 2; size <= N_FFT; size <<= 1) {
    const half = size >> 1;
    const stride = N_FFT / size;
    for (let start = 0; start < N_FFT; start += size) {
      for (let k = 0; k < half; k++) {
        const tr = TWIDDLE_RE[k * stride];
        const ti = TWIDDLE_IM[k * stride];
        const a = start + k;
        const b = a + half;
        const xr = re[b] * tr - im[b] * ti;
        const xi = re[b] * ti + im[b] * tr;
        re[b] = re[a] - xr;
        im[b] = im[a] - xi;
        re[a] += xr;
        im[a] += xi;
      }
    }
  }
}

const HANN = (() => {
  const w = new Float64Array(N_FFT);
  for (let i = 0; i < N_FFT; i++) {
    w[i] = 0.5 * (1 - Math.cos(2 * Math.PI * i / N_FFT));
  }
  return w;
})();

function hzToMel(hz: number): number {
  return 2595 * Math.log10(1 + hz / 700);
}

function melToHz(mel: number): number {
  return 700 * (10 ** (mel / 2595) - 1);
}

/** Triangular filters as (startBin, weights) pairs. */
export function melFilterbank(): { start: number; weights: Float64Array }[] {
  const fMax = SAMPLE_RATE / 2;
  const melPoints = new Float64Array(N_MELS + 2);
  const top = hzToMel(fMax);
  for (let i = 0; i < melPoints.length; i++) melPoints[i] = (top * i) / (N_MELS + 1);
  const binHz = SAMPLE_RATE / N_FFT;
  const edges = Array.from(melPoints, (m) => melToHz(m) / binHz);
  const filters = [];
  for (let m = 0; m < N_MELS; m++) {
    const lo = edges[m];
    const mid = edges[m + 1];
    const hi = edges[m + 2];
    const start = Math.max(0, Math.ceil(lo));
    const end = Math.min(N_BINS - 1, Math.floor(hi));
    const weights = new Float64Array(Math.max(0, end - start + 1));
    for (let b = start; b <= end; b++) {
      const f = b;
      let w = 0;
      if (f >= lo && f <= mid && mid > lo) w = (f - lo) / (mid - lo);
      else if (f > mid && f <= hi && hi > mid) w = (hi - f) / (hi - mid);
      weights[b - start] = Math.max(0, w);
    }
    filters.push({ start, weights });
  }
  return filters;
}

const FILTERS = melFilterbank();

/**
 * Log-mel features for a mono 16 kHz clip: N_FRAMES x N_MELS,
 * row-major, frames beyond the signal filled at the log floor.
 */
export function logMelSpectrogram(samples: Float64Array): Float64Array {
  const naturalFrames = Math.max(1, Math.ceil(samples.length / HOP));
  const nFrames = Math.min(naturalFrames, N_FRAMES);
  const half = N_FFT / 2;

  const power = new Float64Array(N_FRAMES * N_MELS).fill(1e-10);
  const re = new Float64Array(N_FFT);
  const im = new Float64Array(N_FFT);
  const len = samples.length;
  for (let t = 0; t < nFrames; t++) {
    const center = t * HOP;
    for (let i = 0; i < N_FFT; i++) {
      // iterated reflection keeps short signals in range
      let idx = center - half + i;
      if (len === 1) {
        idx = 0;
      } else {
        while (idx < 0 || idx >= len) {
          if (idx < 0) idx = -idx;
          if (idx >= len) idx = 2 * (len - 1) - idx;
        }
      }
      re[i] = samples[idx] * HANN[i];
      im[i] = 0;
    }
    fft512(re, im);
    for (let m = 0; m < N_MELS; m++) {
      const { start, weights } = FILTERS[m];
      let acc = 0;
      for (let k = 0; k < weights.length; k++) {
        const b = start + k;
        acc += weights[k] * (re[b] * re[b] + im[b] * im[b]);
      }
      power[t * N_MELS + m] = Math.max(acc, 1e-10);
    }
  }

  const logmel = new Float64Array(N_FRAMES * N_MELS);
  let maxLog = -Infinity;
  for (let i = 0; i < power.length; i++) {
    logmel[i] = Math.log10(power[i]);
    if (logmel[i] > maxLog) maxLog = logmel[i];
  }
  for (let i = 0; i < logmel.length; i++) {
    logmel[i] = (Math.max(logmel[i], maxLog - 8) + 4) / 4;
  }
  return logmel;
}
