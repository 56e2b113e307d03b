/**
 * Message-loss mask sampling for training and lossy evaluation.
 *
 * Mirrors the three loss modes of a broadcast round: per-(sender, receiver)
 * loss, receive blackout and transmit blackout. One sample covers every
 * gather site of every layer; queries, keys and values share the x-site
 * outcome because a single gather feeds all three projections.
 */

import { Rng } from "./rng.js";
import {
  ModelConfig,
  PruneMasks,
  gatherSites,
  heldColumns,
  maskKey,
} from "./sites.js";

export interface DropProbs {
  pPair: number;
  pRxBlackout: number;
  pTxBlackout: number;
}

export const NO_DROP: DropProbs = { pPair: 0, pRxBlackout: 0, pTxBlackout: 0 };

export function validateProbs(p: DropProbs): void {
  for (const v of [p.pPair, p.pRxBlackout, p.pTxBlackout]) {
    if (v < 0 || v > 1) throw new Error("loss probabilities must be in [0, 1]");
  }
}

/** heldSets.get(`${layer}/${site}`)[device] = held column indices. */
export type HeldSets = Map<string, Int32Array[]>;

function roundDelivery(devices: number, probs: DropProbs, rng: Rng): boolean[][] {
  const tx = Array.from({ length: devices }, () => rng.next() < probs.pTxBlackout);
  const rx = Array.from({ length: devices }, () => rng.next() < probs.pRxBlackout);
  const delivered: boolean[][] = [];
  for (let s = 0; s < devices; s++) {
    delivered.push([]);
    for (let r = 0; r < devices; r++) {
      const pairLost = rng.next() < probs.pPair;
      delivered[s].push(s !== r && !tx[s] && !rx[r] && !pairLost);
    }
  }
  return delivered;
}

/** Sample one forward pass worth of held sets (resampled every step). */
export function sampleHeldSets(
  cfg: ModelConfig,
  prune: PruneMasks,
  probs: DropProbs,
  rng: Rng,
): HeldSets {
  validateProbs(probs);
  const held: HeldSets = new Map();
  for (let layer = 0; layer < cfg.layers; layer++) {
    for (const site of gatherSites(cfg)) {
      const key = maskKey(layer, site.name);
      const mask = prune.get(key)!;
      const lossless = probs.pPair === 0 && probs.pRxBlackout === 0 && probs.pTxBlackout === 0;
      const delivered = lossless ? null : roundDelivery(cfg.devices, probs, rng);
      held.set(key, Array.from({ length: cfg.devices }, (_, dev) =>
        heldColumns(dev, site, mask, (s) => (delivered ? delivered[s][dev] : true)),
      ));
    }
  }
  return held;
}

/** Loss-free held sets (pruning only). */
export function losslessHeldSets(cfg: ModelConfig, prune: PruneMasks): HeldSets {
  return sampleHeldSets(cfg, prune, NO_DROP, new Rng(0));
}
