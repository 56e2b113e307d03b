import assert from "node:assert/strict";
import { test } from "node:test";

import { parseTrainSpec, trainFromSpec } from "../src/train.js";

const specJson = {
  config: {
    layers: 1, features: 16, heads: 4, tokens: 6, mlp_hidden: 32,
    mlp_layers: 1, activation: "gelu", devices: 2, bytes_per_element: 1,
  },
  dataset: { kind: "synthetic", length: 1500, components: 2, noise: 0.02 },
  patch: 4,
  epochs: 6,
  batch_size: 16,
  learning_rate: 0.01,
  prune: null,
  msgdrop: null,
  seed: 3,
};

test("training reduces the loss substantially", () => {
  const result = trainFromSpec(parseTrainSpec(specJson));
  const first = result.history[0];
  const last = result.history[result.history.length - 1];
  assert.ok(last < first / 4, `loss ${first} -> ${last}`);
});

test("fixed seed gives identical weights, different seed does not", () => {
  const a = trainFromSpec(parseTrainSpec(specJson));
  const b = trainFromSpec(parseTrainSpec(specJson));
  const c = trainFromSpec(parseTrainSpec({ ...specJson, seed: 4 }));
  assert.deepEqual([...a.params.layers[0].wq.data], [...b.params.layers[0].wq.data]);
  assert.notDeepEqual([...a.params.layers[0].wq.data], [...c.params.layers[0].wq.data]);
});

test("pruning stages produce nested masks at the scheduled ratios", () => {
  const result = trainFromSpec(parseTrainSpec({
    ...specJson,
    epochs: 3,
    prune: { target_ratio: 0.5, stages: 2, retrain_epochs: 1 },
  }));
  assert.equal(result.stages.length, 2);
  assert.ok(Math.abs(result.stages[0].ratio - 0.25) < 1e-12);
  assert.ok(Math.abs(result.stages[1].ratio - 0.5) < 1e-12);
  for (const [key, perDev] of result.masks) {
    perDev.forEach((m) => {
      const zeros = m.length - m.reduce((x, y) => x + y, 0);
      assert.equal(zeros, Math.floor(0.5 * m.length), key);
    });
  }
  // nested: stage-1 zeros survive into the final masks
  for (const [key, perDev] of result.stages[0].masks) {
    perDev.forEach((m, dev) => {
      m.forEach((bit, col) => {
        if (!bit) assert.equal(result.masks.get(key)![dev][col], 0);
      });
    });
  }
});

test("training with message drop stays finite and learns", () => {
  const result = trainFromSpec(parseTrainSpec({
    ...specJson,
    epochs: 3,
    msgdrop: { p_pair: 0.1, epochs: 3 },
  }));
  const last = result.history[result.history.length - 1];
  assert.ok(Number.isFinite(last) && last < result.history[0]);
});
