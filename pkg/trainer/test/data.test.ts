import assert from "node:assert/strict";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { test } from "node:test";

import { Rng } from "../src/rng.js";
import { loadSeries, makeDataset, packBatch } from "../src/data.js";

test("synthetic series is deterministic in the seed", () => {
  const spec = { kind: "synthetic" as const, length: 500, components: 3, noise: 0.05 };
  const a = loadSeries(spec, new Rng(4));
  const b = loadSeries(spec, new Rng(4));
  const c = loadSeries(spec, new Rng(5));
  assert.deepEqual([...a], [...b]);
  assert.notDeepEqual([...a], [...c]);
  assert.ok(Math.max(...a.map(Math.abs)) < 10);
});

test("windows split into input patches and a target patch", () => {
  const series = Float64Array.from({ length: 200 }, (_, i) => i);
  const ds = makeDataset(series, 4, 8, 0.25);
  const windows = Math.floor((200 - 40) / 8) + 1;
  assert.equal(ds.train.length + ds.test.length, windows);
  assert.equal(ds.test.length, Math.floor(windows * 0.25));
  const s = ds.train[0];
  assert.equal(s.input.length, 4 * 8);
  assert.deepEqual([...s.input.slice(0, 3)], [0, 1, 2]);
  assert.deepEqual([...s.target], [32, 33, 34, 35, 36, 37, 38, 39]);
  // time-ordered split: test samples come after train samples
  assert.ok(ds.test[0].input[0] > ds.train[ds.train.length - 1].input[0]);
});

test("packBatch stacks rows in window order", () => {
  const series = Float64Array.from({ length: 120 }, (_, i) => i);
  const ds = makeDataset(series, 2, 4);
  const packed = packBatch(ds.train.slice(0, 3), 2, 4);
  assert.equal(packed.batch, 3);
  assert.equal(packed.inputs.length, 3 * 2 * 4);
  assert.equal(packed.targets.length, 3 * 4);
  assert.deepEqual([...packed.inputs.slice(0, 4)], [0, 1, 2, 3]);
});

test("csv loader reads one value per line and rejects text", () => {
  const dir = mkdtempSync(join(tmpdir(), "trainer-"));
  const good = join(dir, "series.csv");
  writeFileSync(good, "1.5\n2.5\n\n3.5\n");
  const series = loadSeries({ kind: "csv", path: good }, new Rng(0));
  assert.deepEqual([...series], [1.5, 2.5, 3.5]);
  const bad = join(dir, "bad.csv");
  writeFileSync(bad, "1.5\nvalue\n");
  const loaded = loadSeries({ kind: "csv", path: bad }, new Rng(0));
  assert.deepEqual([...loaded], [1.5]);  // header-like lines are skipped
});
