/**
 * Held-out evaluation under inference-time message loss: the masked forward
 * runs with loss masks resampled per test batch, swept over loss rates and
 * averaged over seeds. CSV schema: loss_pct, seed, test_mse.
 */

import { writeFileSync } from "node:fs";

import { Dataset, packBatch } from "./data.js";
import { DropProbs, NO_DROP, losslessHeldSets, sampleHeldSets } from "./msgdrop.js";
import { ModelParams, forwardLoss } from "./model.js";
import { Rng } from "./rng.js";
import { ModelConfig, PruneMasks } from "./sites.js";

export function testMse(
  params: ModelParams,
  cfg: ModelConfig,
  dataset: Dataset,
  masks: PruneMasks,
  drop: DropProbs,
  rng: Rng,
  batchSize = 32,
): number {
  const dropActive = drop.pPair > 0 || drop.pRxBlackout > 0 || drop.pTxBlackout > 0;
  const lossless = losslessHeldSets(cfg, masks);
  let sum = 0;
  let count = 0;
  for (let start = 0; start < dataset.test.length; start += batchSize) {
    const samples = dataset.test.slice(start, start + batchSize);
    const batch = packBatch(samples, dataset.tokens, dataset.patch);
    const held = dropActive ? sampleHeldSets(cfg, masks, drop, rng) : lossless;
    const { loss } = forwardLoss(params, cfg, batch, held);
    sum += loss.data[0] * samples.length;
    count += samples.length;
  }
  return sum / count;
}

export interface EvalRow {
  lossPct: number;
  seed: number;
  testMse: number;
}

/** Sweep message-loss percentages, several seeds per point (mode a by
 * default: the pairwise axis, blackouts zero). */
export function evaluateSweep(
  params: ModelParams,
  cfg: ModelConfig,
  dataset: Dataset,
  masks: PruneMasks,
  lossPcts: number[],
  seeds = 10,
  batchSize = 32,
): EvalRow[] {
  const rows: EvalRow[] = [];
  for (const lossPct of lossPcts) {
    for (let seed = 0; seed < seeds; seed++) {
      const drop: DropProbs = lossPct === 0 ? NO_DROP : {
        pPair: lossPct / 100,
        pRxBlackout: 0,
        pTxBlackout: 0,
      };
      const mse = testMse(params, cfg, dataset, masks, drop,
                          new Rng(0x5eed + 977 * seed + lossPct * 13), batchSize);
      rows.push({ lossPct, seed, testMse: mse });
    }
  }
  return rows;
}

export function meanAt(rows: EvalRow[], lossPct: number): number {
  const vals = rows.filter((r) => r.lossPct === lossPct).map((r) => r.testMse);
  return vals.reduce((a, b) => a + b, 0) / vals.length;
}

export function writeEvalCsv(rows: EvalRow[], path: string): void {
  const lines = ["loss_pct,seed,test_mse"];
  for (const r of rows) lines.push(`${r.lossPct},${r.seed},${r.testMse}`);
  writeFileSync(path, lines.join("\n") + "\n");
}
