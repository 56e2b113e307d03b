/**
 * Deployment semantics shared with the inference simulator: gather sites,
 * per-device broadcast masks, magnitude ranking and the stepwise schedule.
 * These must match the simulator exactly so exported masks mean the same
 * thing on both sides.
 */

export interface ModelConfig {
  layers: number;
  features: number;
  heads: number;
  tokens: number;
  mlpHidden: number;
  mlpLayers: number;
  activation: "relu" | "gelu";
  devices: number;
  bytesPerElement: number;
}

export function parseConfig(json: Record<string, unknown>): ModelConfig {
  const cfg: ModelConfig = {
    layers: json.layers as number,
    features: json.features as number,
    heads: json.heads as number,
    tokens: json.tokens as number,
    mlpHidden: (json.mlp_hidden as number) ?? 2 * (json.features as number),
    mlpLayers: (json.mlp_layers as number) ?? 1,
    activation: ((json.activation as string) ?? "gelu") as "relu" | "gelu",
    devices: (json.devices as number) ?? 1,
    bytesPerElement: (json.bytes_per_element as number) ?? 1,
  };
  validateConfig(cfg);
  return cfg;
}

export function configToJson(cfg: ModelConfig): Record<string, number | string> {
  return {
    layers: cfg.layers,
    features: cfg.features,
    heads: cfg.heads,
    tokens: cfg.tokens,
    mlp_hidden: cfg.mlpHidden,
    mlp_layers: cfg.mlpLayers,
    activation: cfg.activation,
    devices: cfg.devices,
    bytes_per_element: cfg.bytesPerElement,
  };
}

export function validateConfig(cfg: ModelConfig): void {
  if (cfg.features % cfg.heads) throw new Error("heads must divide features");
  if (cfg.features % cfg.devices) throw new Error("devices must divide features");
  if (cfg.heads % cfg.devices) throw new Error("devices must divide heads");
  if (cfg.mlpHidden % cfg.devices) throw new Error("devices must divide mlp_hidden");
  if (cfg.activation !== "relu" && cfg.activation !== "gelu") {
    throw new Error(`unknown activation ${cfg.activation}`);
  }
}

export function mlpWeightCount(cfg: ModelConfig): number {
  return cfg.mlpLayers + 1;
}

export interface GatherSite {
  name: string;
  width: number;
  perDevice: number;
}

/** One layer's gather sites in execution order: x, h, then one per
 * residual-block weight matrix. */
export function gatherSites(cfg: ModelConfig): GatherSite[] {
  const sites: GatherSite[] = [
    { name: "x", width: cfg.features, perDevice: cfg.features / cfg.devices },
    { name: "h", width: cfg.features, perDevice: cfg.features / cfg.devices },
  ];
  for (let i = 0; i < mlpWeightCount(cfg); i++) {
    const width = i === 0 ? cfg.features : cfg.mlpHidden;
    sites.push({ name: `mlp${i}`, width, perDevice: width / cfg.devices });
  }
  return sites;
}

/** masks.get(`${layer}/${site}`) is a per-device array of 0/1 broadcast bits. */
export type PruneMasks = Map<string, Uint8Array[]>;

export function maskKey(layer: number, site: string): string {
  return `${layer}/${site}`;
}

export function allOnesMasks(cfg: ModelConfig): PruneMasks {
  const masks: PruneMasks = new Map();
  for (let layer = 0; layer < cfg.layers; layer++) {
    for (const site of gatherSites(cfg)) {
      masks.set(
        maskKey(layer, site.name),
        Array.from({ length: cfg.devices }, () => new Uint8Array(site.perDevice).fill(1)),
      );
    }
  }
  return masks;
}

export function copyMasks(masks: PruneMasks): PruneMasks {
  const out: PruneMasks = new Map();
  for (const [key, perDev] of masks) {
    out.set(key, perDev.map((m) => Uint8Array.from(m)));
  }
  return out;
}

export function maskSparsity(masks: PruneMasks): number {
  let zeros = 0;
  let total = 0;
  for (const perDev of masks.values()) {
    for (const m of perDev) {
      total += m.length;
      for (const bit of m) if (!bit) zeros++;
    }
  }
  return total ? zeros / total : 0;
}

/** Held columns of one device at a site: all of its own plus other devices'
 * columns whose mask bit is 1 and whose payload was delivered. */
export function heldColumns(
  device: number,
  site: GatherSite,
  mask: Uint8Array[],
  delivered: (sender: number) => boolean,
): Int32Array {
  const held: number[] = [];
  const devices = mask.length;
  for (let e = 0; e < devices; e++) {
    const lo = e * site.perDevice;
    if (e === device) {
      for (let j = 0; j < site.perDevice; j++) held.push(lo + j);
    } else if (delivered(e)) {
      for (let j = 0; j < site.perDevice; j++) if (mask[e][j]) held.push(lo + j);
    }
  }
  return Int32Array.from(held);
}

export interface WeightView {
  rows: number;
  cols: number;
  data: Float64Array;
}

/**
 * Magnitude score per gathered column: sum of |w| over destination columns
 * owned by other devices (intra-device links never count). Several matrices
 * consuming the same gathered input (q, k, v) sum their scores.
 */
export function columnScores(weights: WeightView[], devices: number): Float64Array[] {
  const rows = weights[0].rows;
  const sIn = rows / devices;
  const scores = Array.from({ length: devices }, () => new Float64Array(sIn));
  for (const w of weights) {
    if (w.rows !== rows) throw new Error("weights at one site must share input width");
    const sOut = w.cols / devices;
    for (let dev = 0; dev < devices; dev++) {
      for (let j = 0; j < sIn; j++) {
        const row = dev * sIn + j;
        let total = 0;
        let own = 0;
        for (let c = 0; c < w.cols; c++) {
          const v = Math.abs(w.data[row * w.cols + c]);
          total += v;
          if (c >= dev * sOut && c < (dev + 1) * sOut) own += v;
        }
        scores[dev][j] += total - own;
      }
    }
  }
  return scores;
}

/** Ascending score order per device, ties broken by lower column index. */
export function rankColumns(weights: WeightView[], devices: number): Int32Array[] {
  return columnScores(weights, devices).map((s) => {
    const order = Int32Array.from(s.keys());
    return order.sort((a, b) => (s[a] - s[b]) || (a - b));
  });
}

export function stepwiseSchedule(targetRatio: number, stages: number): number[] {
  if (targetRatio < 0 || targetRatio >= 1) throw new Error("target ratio must be in [0, 1)");
  if (stages < 1) throw new Error("stages must be >= 1");
  return Array.from({ length: stages }, (_, i) => (targetRatio * (i + 1)) / stages);
}

/** Zero the lowest-ranked floor(ratio*S) columns per device; already-pruned
 * columns stay pruned (nested), fewer zeros than present is an error. */
export function applyPruning(
  masks: PruneMasks,
  ratio: number,
  rankings: Map<string, Int32Array[]>,
): PruneMasks {
  if (ratio < 0 || ratio >= 1) throw new Error("ratio must be in [0, 1)");
  const out = copyMasks(masks);
  for (const [key, perDev] of out) {
    const ranking = rankings.get(key);
    if (!ranking) throw new Error(`no ranking for site ${key}`);
    perDev.forEach((mask, dev) => {
      const s = mask.length;
      const target = Math.floor(ratio * s);
      let zeros = 0;
      for (const bit of mask) if (!bit) zeros++;
      if (target < zeros) throw new Error(`non-nested pruning request at ${key}`);
      for (const col of ranking[dev]) {
        if (zeros >= target) break;
        if (mask[col]) {
          mask[col] = 0;
          zeros++;
        }
      }
    });
  }
  return out;
}
