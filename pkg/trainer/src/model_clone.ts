/** Deep copy of model parameters (for baselines and snapshots). */

import { Tensor } from "./autograd.js";
import { LayerParams, ModelParams } from "./model.js";

function cloneTensor(t: Tensor): Tensor {
  const out = new Tensor(t.rows, t.cols, Float64Array.from(t.data), t.requiresGrad);
  return out;
}

export function cloneParams(params: ModelParams): ModelParams {
  const layers: LayerParams[] = params.layers.map((l) => ({
    wq: cloneTensor(l.wq),
    wk: cloneTensor(l.wk),
    wv: cloneTensor(l.wv),
    wo: cloneTensor(l.wo),
    mlp: l.mlp.map(cloneTensor),
    ln1Gamma: cloneTensor(l.ln1Gamma),
    ln1Beta: cloneTensor(l.ln1Beta),
    ln2Gamma: cloneTensor(l.ln2Gamma),
    ln2Beta: cloneTensor(l.ln2Beta),
  }));
  return { layers, wIn: cloneTensor(params.wIn), wOut: cloneTensor(params.wOut) };
}
