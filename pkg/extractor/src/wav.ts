/**
 * Minimal RIFF/WAVE decoding and resampling.
 *
 * Supports PCM16, PCM24, PCM32 and IEEE float32, any channel count
 * (averaged to mono), any source rate (linear resampling). This is the
 * ingestion boundary: everything downstream runs at 16 kHz mono.
 */

export const TARGET_SAMPLE_RATE = 16000;

export interface DecodedWav {
  samples: Float64Array; // mono, [-1, 1]
  sampleRate: number;
}

export class WavError extends Error {}

export function decodeWav(bytes: Buffer): DecodedWav {
  if (bytes.length < 44 || bytes.toString("ascii", 0, 4) !== "RIFF" ||
      bytes.toString("ascii", 8, 12) !== "WAVE") {
    throw new WavError("not a RIFF/WAVE file");
  }
  let pos = 12;
  let format = 0;
  let channels = 0;
  let sampleRate = 0;
  let bitsPerSample = 0;
  let data: Buffer | null = null;
  while (pos + 8 <= bytes.length) {
    const id = bytes.toString("ascii", pos, pos + 4);
    const size = bytes.readUInt32LE(pos + 4);
    const body = pos + 8;
    if (id === "fmt ") {
      format = bytes.readUInt16LE(body);
      channels = bytes.readUInt16LE(body + 2);
      sampleRate = bytes.readUInt32LE(body + 4);
      bitsPerSample = bytes.readUInt16LE(body + 14);
    } else if (id === "data") {
      data = bytes.subarray(body, body + size);
    }
    pos = body + size + (size % 2); // chunks are word aligned
  }
  if (!channels || !sampleRate) throw new WavError("missing fmt chunk");
  if (!data) throw new WavError("missing data chunk");

  let frames: number;
  let read: (frame: number, ch: number) => number;
  const f = format;
  if (f === 1 && bitsPerSample === 16) {
    frames = Math.floor(data.length / (2 * channels));
    read = (i, c) => data!.readInt16LE((i * channels + c) * 2) / 32768;
  } else if (f === 1 && bitsPerSample === 24) {
    frames = Math.floor(data.length / (3 * channels));
    read = (i, c) => {
      const o = (i * channels + c) * 3;
      let v = data![o] | (data![o + 1] << 8) | (data![o + 2] << 16);
      if (v >= 0x800000) v -= 0x1000000;
      return v / 8388608;
    };
  } else if (f === 1 && bitsPerSample === 32) {
    frames = Math.floor(data.length / (4 * channels));
    read = (i, c) => data!.readInt32LE((i * channels + c) * 4) / 2147483648;
  } else if (f === 3 && bitsPerSample === 32) {
    frames = Math.floor(data.length / (4 * channels));
    read = (i, c) => data!.readFloatLE((i * channels + c) * 4);
  } else {
    throw new WavError(`unsupported format ${f} / ${bitsPerSample} bits`);
  }
  if (frames === 0) throw new WavError("empty data chunk");

  const mono = new Float64Array(frames);
  for (let i = 0; i < frames; i++) {
    let acc = 0;
    for (let c = 0; c < channels; c++) acc += read(i, c);
    mono[i] = acc / channels;
  }
  return { samples: mono, sampleRate };
}

/** Linear-interpolation resampling to the target rate. */
export function resample(samples: Float64Array, fromRate: number,
                         toRate: number = TARGET_SAMPLE_RATE): Float64Array {
  if (fromRate === toRate) return samples;
  if (fromRate <= 0 || toRate <= 0) throw new WavError("bad sample rate");
  const outLen = Math.max(1, Math.round(samples.length * toRate / fromRate));
  const out = new Float64Array(outLen);
  const step = fromRate / toRate;
  for (let i = 0; i < outLen; i++) {
    const x = i * step;
    const i0 = Math.min(Math.floor(x), samples.length - 1);
    const i1 = Math.min(i0 + 1, samples.length - 1);
    const frac = x - i0;
    out[i] = samples[i0] * (1 - frac) + samples[i1] * frac;
  }
  return out;
}

export function loadWavMono16k(bytes: Buffer): Float64Array {
  const { samples, sampleRate } = decodeWav(bytes);
  return resample(samples, sampleRate);
}

/** PCM16 mono writer, used by tests to synthesize fixtures. */
export function encodeWavPcm16(samples: Float64Array | number[],
                               sampleRate: number, channels = 1): Buffer {
  const n = samples.length;
  const dataSize = n * 2;
  const buf = Buffer.alloc(44 + dataSize);
  buf.write("RIFF", 0, "ascii");
  buf.writeUInt32LE(36 + dataSize, 4);
  buf.write("WAVE", 8, "ascii");
  buf.write("fmt ", 12, "ascii");
  buf.writeUInt32LE(16, 16);
  buf.writeUInt16LE(1, 20);
  buf.writeUInt16LE(channels, 22);
  buf.writeUInt32LE(sampleRate, 24);
  buf.writeUInt32LE(sampleRate * channels * 2, 28);
  buf.writeUInt16LE(channels * 2, 32);
  buf.writeUInt16LE(16, 34);
  buf.write("data", 36, "ascii");
  buf.writeUInt32LE(dataSize, 40);
  for (let i = 0; i < n; i++) {
    const v = Math.max(-1, Math.min(1, samples[i]));
    buf.writeInt16LE(Math.round(v * 32767), 44 + i * 2);
  }
  return buf;
}
