/**
 * Small time-series transformer with the deployment-faithful masked forward:
 * per-device layernorm statistics over held columns, every weight product
 * restricted to the rows a device would have received, heads computed on
 * their owning device, residual additions on owned columns only.
 *
 * The linear in/out heads around the transformer stack are trainer-local
 * (sources and sinks stay outside the distributed block) and ride along in
 * bundle metadata so evaluation can reconstruct the full regression model.
 */

import {
  Tensor,
  activation,
  add,
  concatCols,
  gatherRows,
  layernormCols,
  matmul,
  matmulRowMasked,
  matmulTransposeB,
  mseLoss,
  scale,
  sliceCols,
  sliceRows,
  softmaxRows,
} from "./autograd.js";
import { Rng } from "./rng.js";
import { HeldSets } from "./msgdrop.js";
import { ModelConfig, maskKey, mlpWeightCount } from "./sites.js";

export interface LayerParams {
  wq: Tensor;
  wk: Tensor;
  wv: Tensor;
  wo: Tensor;
  mlp: Tensor[];
  ln1Gamma: Tensor;
  ln1Beta: Tensor;
  ln2Gamma: Tensor;
  ln2Beta: Tensor;
}

export interface ModelParams {
  layers: LayerParams[];
  wIn: Tensor;   // patch -> features embedding
  wOut: Tensor;  // features -> patch prediction head
}

export function mlpShapes(cfg: ModelConfig): Array<[number, number]> {
  const count = mlpWeightCount(cfg);
  const shapes: Array<[number, number]> = [];
  for (let i = 0; i < count; i++) {
    shapes.push([
      i === 0 ? cfg.features : cfg.mlpHidden,
      i === count - 1 ? cfg.features : cfg.mlpHidden,
    ]);
  }
  return shapes;
}

export function initParams(cfg: ModelConfig, patch: number, rng: Rng): ModelParams {
  const w = (rows: number, cols: number) =>
    Tensor.param(rows, cols, () => (rng.normal() * 0.5) / Math.sqrt(rows));
  const f = cfg.features;
  const layers: LayerParams[] = [];
  for (let i = 0; i < cfg.layers; i++) {
    layers.push({
      wq: w(f, f),
      wk: w(f, f),
      wv: w(f, f),
      wo: w(f, f),
      mlp: mlpShapes(cfg).map(([r, c]) => w(r, c)),
      ln1Gamma: Tensor.param(1, f, () => 1),
      ln1Beta: Tensor.param(1, f, () => 0),
      ln2Gamma: Tensor.param(1, f, () => 1),
      ln2Beta: Tensor.param(1, f, () => 0),
    });
  }
  return { layers, wIn: w(patch, f), wOut: w(f, patch) };
}

export function allParams(params: ModelParams): Tensor[] {
  const out: Tensor[] = [params.wIn, params.wOut];
  for (const l of params.layers) {
    out.push(l.wq, l.wk, l.wv, l.wo, ...l.mlp,
             l.ln1Gamma, l.ln1Beta, l.ln2Gamma, l.ln2Beta);
  }
  return out;
}

/**
 * Masked transformer stack over a batch stacked along rows.
 *
 * `x` is (batch*tokens) x features; attention is evaluated per window so
 * tokens never attend across windows. `held` supplies the per-site held
 * columns (pruning plus any sampled message losses).
 */
export function transformerForward(
  params: ModelParams,
  cfg: ModelConfig,
  x: Tensor,
  held: HeldSets,
  batch: number,
): Tensor {
  const d = cfg.devices;
  const s = cfg.features / d;
  const dh = cfg.features / cfg.heads;
  const headsPerDev = cfg.heads / d;

  for (let li = 0; li < cfg.layers; li++) {
    const lw = params.layers[li];
    const heldX = held.get(maskKey(li, "x"))!;

    const hBlocks: Tensor[] = [];
    for (let dev = 0; dev < d; dev++) {
      const xbar = layernormCols(x, heldX[dev], lw.ln1Gamma, lw.ln1Beta);
      const headOuts: Tensor[] = [];
      for (let hl = 0; hl < headsPerDev; hl++) {
        const lo = dev * s + hl * dh;
        const q = matmulRowMasked(xbar, sliceCols(lw.wq, lo, lo + dh), heldX[dev]);
        const k = matmulRowMasked(xbar, sliceCols(lw.wk, lo, lo + dh), heldX[dev]);
        const v = matmulRowMasked(xbar, sliceCols(lw.wv, lo, lo + dh), heldX[dev]);
        const perWindow: Tensor[] = [];
        for (let b = 0; b < batch; b++) {
          const qb = sliceRows(q, b * cfg.tokens, (b + 1) * cfg.tokens);
          const kb = sliceRows(k, b * cfg.tokens, (b + 1) * cfg.tokens);
          const vb = sliceRows(v, b * cfg.tokens, (b + 1) * cfg.tokens);
          const scores = scale(matmulTransposeB(qb, kb), 1 / Math.sqrt(dh));
          perWindow.push(matmul(softmaxRows(scores), vb));
        }
        headOuts.push(stackRows(perWindow));
      }
      hBlocks.push(headOuts.length === 1 ? headOuts[0] : concatCols(headOuts));
    }
    const hFull = concatCols(hBlocks);

    const heldH = held.get(maskKey(li, "h"))!;
    const yBlocks: Tensor[] = [];
    for (let dev = 0; dev < d; dev++) {
      const o = matmulRowMasked(hFull, sliceCols(lw.wo, dev * s, (dev + 1) * s), heldH[dev]);
      yBlocks.push(add(o, sliceCols(x, dev * s, (dev + 1) * s)));
    }
    const y = concatCols(yBlocks);

    let cur = y;
    const count = mlpWeightCount(cfg);
    for (let i = 0; i < count; i++) {
      const heldM = held.get(maskKey(li, `mlp${i}`))!;
      const w = lw.mlp[i];
      const outCols = w.cols / d;
      const blocks: Tensor[] = [];
      for (let dev = 0; dev < d; dev++) {
        const z = i === 0 ? layernormCols(cur, heldM[dev], lw.ln2Gamma, lw.ln2Beta) : cur;
        let block = matmulRowMasked(z, sliceCols(w, dev * outCols, (dev + 1) * outCols), heldM[dev]);
        if (i < count - 1) block = activation(block, cfg.activation);
        blocks.push(block);
      }
      cur = concatCols(blocks);
    }
    x = add(cur, y);
  }
  return x;
}

function stackRows(parts: Tensor[]): Tensor {
  // windows are contiguous row blocks; concatenating along rows re-stacks them
  const cols = parts[0].cols;
  let rows = 0;
  for (const p of parts) rows += p.rows;
  const out = new Tensor(rows, cols);
  let off = 0;
  for (const p of parts) {
    out.data.set(p.data, off * cols);
    off += p.rows;
  }
  out.parents = [...parts];
  out.backwardFn = () => {
    const g = out.grad!;
    let o = 0;
    for (const p of parts) {
      if (p.requiresGrad || p.backwardFn) {
        const gp = p.ensureGrad();
        for (let i = 0; i < p.data.length; i++) gp[i] += g[o * cols + i];
      }
      o += p.rows;
    }
  };
  return out;
}

export interface Batch {
  inputs: Float64Array;   // (batch*tokens) x patch, row-major
  targets: Float64Array;  // batch x patch
  batch: number;
}

/** Full regression forward: embed patches, run the masked stack, predict the
 * next patch from each window's last token. Returns the scalar MSE loss. */
export function forwardLoss(
  params: ModelParams,
  cfg: ModelConfig,
  batchData: Batch,
  held: HeldSets,
): { loss: Tensor; pred: Tensor } {
  const patch = params.wIn.rows;
  const rows = batchData.batch * cfg.tokens;
  const xIn = new Tensor(rows, patch, batchData.inputs);
  const embedded = matmul(xIn, params.wIn);
  const out = transformerForward(params, cfg, embedded, held, batchData.batch);
  const lastTokens = Int32Array.from(
    { length: batchData.batch }, (_, b) => b * cfg.tokens + cfg.tokens - 1);
  const pred = matmul(gatherRows(out, lastTokens), params.wOut);
  return { loss: mseLoss(pred, batchData.targets), pred };
}
