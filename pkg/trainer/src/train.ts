/**
 * Training pipeline: plain training, stepwise communication-aware pruning
 * with retraining, then message-dropout fine-tuning, exported as a bundle.
 *
 * Pruning stages run before dropout fine-tuning; each stage re-ranks columns
 * from the current weights and extends the (nested) masks before retraining.
 */

import { backward } from "./autograd.js";
import { Adam } from "./adam.js";
import { Dataset, DatasetSpec, PackedBatch, loadSeries, makeDataset, packBatch } from "./data.js";
import { DropProbs, NO_DROP, losslessHeldSets, sampleHeldSets } from "./msgdrop.js";
import { ModelParams, allParams, forwardLoss, initParams } from "./model.js";
import { Rng } from "./rng.js";
import {
  ModelConfig,
  PruneMasks,
  allOnesMasks,
  applyPruning,
  maskKey,
  parseConfig,
  rankColumns,
  stepwiseSchedule,
} from "./sites.js";

export interface PruneSpecOptions {
  targetRatio: number;
  stages: number;
  retrainEpochs: number;
}

export interface MsgDropOptions extends DropProbs {
  epochs: number;
}

export interface TrainSpec {
  config: ModelConfig;
  dataset: DatasetSpec;
  patch: number;
  epochs: number;
  batchSize: number;
  learningRate: number;
  prune: PruneSpecOptions | null;
  msgdrop: MsgDropOptions | null;
  seed: number;
}

export function parseTrainSpec(json: Record<string, any>): TrainSpec {
  const prune = json.prune
    ? {
        targetRatio: json.prune.target_ratio as number,
        stages: (json.prune.stages as number) ?? 1,
        retrainEpochs: (json.prune.retrain_epochs as number) ?? 2,
      }
    : null;
  const msgdrop = json.msgdrop
    ? {
        pPair: (json.msgdrop.p_pair as number) ?? 0,
        pRxBlackout: (json.msgdrop.p_rx as number) ?? 0,
        pTxBlackout: (json.msgdrop.p_tx as number) ?? 0,
        epochs: (json.msgdrop.epochs as number) ?? (json.epochs as number),
      }
    : null;
  return {
    config: parseConfig(json.config),
    dataset: json.dataset as DatasetSpec,
    patch: (json.patch as number) ?? 8,
    epochs: json.epochs as number,
    batchSize: (json.batch_size as number) ?? 32,
    learningRate: (json.learning_rate as number) ?? 0.01,
    prune,
    msgdrop,
    seed: (json.seed as number) ?? 0,
  };
}

export interface EpochOptions {
  epochs: number;
  batchSize: number;
  learningRate: number;
  drop: DropProbs;
}

/** Train in place for a number of epochs; returns per-epoch mean loss. */
export function trainEpochs(
  params: ModelParams,
  cfg: ModelConfig,
  dataset: Dataset,
  masks: PruneMasks,
  opts: EpochOptions,
  rng: Rng,
): number[] {
  const parameters = allParams(params);
  const stepsPerEpoch = Math.max(1, Math.floor(dataset.train.length / opts.batchSize));
  const adam = new Adam(parameters, opts.learningRate, opts.epochs * stepsPerEpoch);
  const order = Int32Array.from(dataset.train.keys());
  const lossless = losslessHeldSets(cfg, masks);
  const dropActive = opts.drop.pPair > 0 || opts.drop.pRxBlackout > 0 || opts.drop.pTxBlackout > 0;
  const history: number[] = [];
  for (let epoch = 0; epoch < opts.epochs; epoch++) {
    rng.shuffle(order);
    let epochLoss = 0;
    for (let step = 0; step < stepsPerEpoch; step++) {
      const samples = Array.from(
        order.slice(step * opts.batchSize, (step + 1) * opts.batchSize),
        (i) => dataset.train[i],
      );
      const batch = packBatch(samples, dataset.tokens, dataset.patch);
      const held = dropActive
        ? sampleHeldSets(cfg, masks, opts.drop, rng)
        : lossless;
      adam.zeroGrads();
      const { loss } = forwardLoss(params, cfg, batch, held);
      if (!Number.isFinite(loss.data[0])) {
        throw new Error(`training diverged: loss ${loss.data[0]} at epoch ${epoch}`);
      }
      backward(loss);
      adam.update();
      epochLoss += loss.data[0];
    }
    history.push(epochLoss / stepsPerEpoch);
  }
  return history;
}

/** Re-rank every site from the current weights. */
export function currentRankings(params: ModelParams, cfg: ModelConfig): Map<string, Int32Array[]> {
  const rankings = new Map<string, Int32Array[]>();
  params.layers.forEach((lw, layer) => {
    rankings.set(maskKey(layer, "x"), rankColumns([lw.wq, lw.wk, lw.wv], cfg.devices));
    rankings.set(maskKey(layer, "h"), rankColumns([lw.wo], cfg.devices));
    lw.mlp.forEach((w, i) => {
      rankings.set(maskKey(layer, `mlp${i}`), rankColumns([w], cfg.devices));
    });
  });
  return rankings;
}

export interface StageSnapshot {
  ratio: number;
  masks: PruneMasks;
  trainLoss: number;
}

export interface TrainResult {
  params: ModelParams;
  masks: PruneMasks;
  dataset: Dataset;
  history: number[];
  stages: StageSnapshot[];
}

export function trainFromSpec(
  spec: TrainSpec,
  onStage?: (snapshot: StageSnapshot, params: ModelParams) => void,
): TrainResult {
  const rng = new Rng(spec.seed);
  const dataRng = rng.fork(1);
  const trainRng = rng.fork(2);
  const series = loadSeries(spec.dataset, dataRng);
  const dataset = makeDataset(series, spec.config.tokens, spec.patch);
  const params = initParams(spec.config, spec.patch, rng.fork(3));
  let masks = allOnesMasks(spec.config);
  const base = {
    batchSize: spec.batchSize,
    learningRate: spec.learningRate,
    drop: NO_DROP,
  };

  const history = trainEpochs(params, spec.config, dataset, masks,
                              { ...base, epochs: spec.epochs }, trainRng);
  const stages: StageSnapshot[] = [];

  if (spec.prune && spec.prune.targetRatio > 0) {
    for (const ratio of stepwiseSchedule(spec.prune.targetRatio, spec.prune.stages)) {
      masks = applyPruning(masks, ratio, currentRankings(params, spec.config));
      const stageHistory = trainEpochs(params, spec.config, dataset, masks,
                                       { ...base, epochs: spec.prune.retrainEpochs }, trainRng);
      history.push(...stageHistory);
      const snapshot = { ratio, masks, trainLoss: stageHistory[stageHistory.length - 1] };
      stages.push(snapshot);
      onStage?.(snapshot, params);
    }
  }

  if (spec.msgdrop && spec.msgdrop.epochs > 0
      && (spec.msgdrop.pPair > 0 || spec.msgdrop.pRxBlackout > 0 || spec.msgdrop.pTxBlackout > 0)) {
    const dropHistory = trainEpochs(params, spec.config, dataset, masks, {
      ...base,
      epochs: spec.msgdrop.epochs,
      drop: spec.msgdrop,
    }, trainRng);
    history.push(...dropHistory);
  }

  return { params, masks, dataset, history, stages };
}
