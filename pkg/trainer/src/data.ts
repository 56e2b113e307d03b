/**
 * Desk-scale datasets: a deterministic multi-sine synthetic generator plus a
 * plain CSV loader. Windows of (tokens+1) patches become one sample each:
 * the first `tokens` patches are the input sequence, the next patch is the
 * regression target.
 */

import { readFileSync } from "node:fs";

import { Rng } from "./rng.js";

export interface SyntheticSpec {
  kind: "synthetic";
  length: number;
  components: number;
  noise: number;
}

export interface CsvSpec {
  kind: "csv";
  path: string;
}

export type DatasetSpec = SyntheticSpec | CsvSpec;

export function loadSeries(spec: DatasetSpec, rng: Rng): Float64Array {
  if (spec.kind === "csv") {
    const values = readFileSync(spec.path, "utf-8")
      .split(/\r?\n/)
      .map((line) => line.trim())
      .filter((line) => line.length > 0 && !/[a-df-zA-DF-Z]/.test(line))
      .map(Number);
    if (values.some(Number.isNaN)) throw new Error(`non-numeric values in ${spec.path}`);
    return Float64Array.from(values);
  }
  const series = new Float64Array(spec.length);
  const comps = Array.from({ length: spec.components }, () => ({
    amplitude: 0.4 + rng.next(),
    period: 16 + rng.next() * 180,
    phase: rng.next() * 2 * Math.PI,
  }));
  for (let t = 0; t < spec.length; t++) {
    let v = 0;
    for (const c of comps) v += c.amplitude * Math.sin((2 * Math.PI * t) / c.period + c.phase);
    series[t] = v + spec.noise * rng.normal();
  }
  return series;
}

export interface Sample {
  input: Float64Array;   // tokens x patch, row-major
  target: Float64Array;  // patch
}

export interface Dataset {
  train: Sample[];
  test: Sample[];
  tokens: number;
  patch: number;
}

export function makeDataset(
  series: Float64Array,
  tokens: number,
  patch: number,
  testFraction = 0.2,
): Dataset {
  const windowLen = (tokens + 1) * patch;
  const samples: Sample[] = [];
  for (let start = 0; start + windowLen <= series.length; start += patch) {
    const input = series.slice(start, start + tokens * patch);
    const target = series.slice(start + tokens * patch, start + windowLen);
    samples.push({ input: Float64Array.from(input), target: Float64Array.from(target) });
  }
  if (samples.length < 10) throw new Error("series too short for the window size");
  // time-ordered split: the test set is the final stretch of the series
  const testCount = Math.max(1, Math.floor(samples.length * testFraction));
  return {
    train: samples.slice(0, samples.length - testCount),
    test: samples.slice(samples.length - testCount),
    tokens,
    patch,
  };
}

export interface PackedBatch {
  inputs: Float64Array;
  targets: Float64Array;
  batch: number;
}

export function packBatch(samples: Sample[], tokens: number, patch: number): PackedBatch {
  const batch = samples.length;
  const inputs = new Float64Array(batch * tokens * patch);
  const targets = new Float64Array(batch * patch);
  samples.forEach((s, b) => {
    inputs.set(s.input, b * tokens * patch);
    targets.set(s.target, b * patch);
  });
  return { inputs, targets, batch };
}
