/**
 * Minimal reverse-mode autograd over dense row-major matrices.
 *
 * Only the operations the masked transformer needs are implemented. The two
 * deployment-specific ones are `matmulRowMasked`, a product restricted to a
 * set of input columns (equivalent to multiplying by a weight matrix with the
 * excluded rows zeroed, so pruned rows receive no gradient), and
 * `layernormCols`, whose row statistics use only a subset of columns.
 */

export class Tensor {
  readonly rows: number;
  readonly cols: number;
  readonly data: Float64Array;
  grad: Float64Array | null = null;
  readonly requiresGrad: boolean;
  backwardFn: (() => void) | null = null;
  parents: Tensor[] = [];

  constructor(rows: number, cols: number, data?: Float64Array, requiresGrad = false) {
    this.rows = rows;
    this.cols = cols;
    this.data = data ?? new Float64Array(rows * cols);
    if (data !== undefined && data.length !== rows * cols) {
      throw new Error(`data length ${data.length} != ${rows}x${cols}`);
    }
    this.requiresGrad = requiresGrad;
  }

  static param(rows: number, cols: number, init: (i: number) => number): Tensor {
    const t = new Tensor(rows, cols, undefined, true);
    for (let i = 0; i < t.data.length; i++) t.data[i] = init(i);
    return t;
  }

  static from(rows: number, cols: number, values: ArrayLike<number>): Tensor {
    return new Tensor(rows, cols, Float64Array.from(values));
  }

  at(r: number, c: number): number {
    return this.data[r * this.cols + c];
  }

  ensureGrad(): Float64Array {
    if (this.grad === null) this.grad = new Float64Array(this.rows * this.cols);
    return this.grad;
  }
}

function track(out: Tensor, parents: Tensor[], backwardFn: () => void): Tensor {
  out.parents = parents;
  out.backwardFn = backwardFn;
  return out;
}

/** Run reverse-mode accumulation from a scalar loss. */
export function backward(loss: Tensor): void {
  if (loss.rows !== 1 || loss.cols !== 1) {
    throw new Error("backward expects a 1x1 loss tensor");
  }
  const order: Tensor[] = [];
  const seen = new Set<Tensor>();
  const visit = (t: Tensor) => {
    if (seen.has(t)) return;
    seen.add(t);
    for (const p of t.parents) visit(p);
    order.push(t);
  };
  visit(loss);
  loss.ensureGrad()[0] = 1;
  for (let i = order.length - 1; i >= 0; i--) {
    const t = order[i];
    if (t.backwardFn !== null && t.grad !== null) t.backwardFn();
  }
}

export function matmul(a: Tensor, b: Tensor): Tensor {
  if (a.cols !== b.rows) throw new Error(`matmul: ${a.cols} != ${b.rows}`);
  const out = new Tensor(a.rows, b.cols);
  const { rows: n, cols: k } = a;
  const m = b.cols;
  for (let i = 0; i < n; i++) {
    const ai = i * k;
    const oi = i * m;
    for (let kk = 0; kk < k; kk++) {
      const av = a.data[ai + kk];
      if (av === 0) continue;
      const bk = kk * m;
      for (let j = 0; j < m; j++) out.data[oi + j] += av * b.data[bk + j];
    }
  }
  return track(out, [a, b], () => {
    const g = out.grad!;
    if (a.requiresGrad || a.backwardFn) {
      const ga = a.ensureGrad();
      for (let i = 0; i < n; i++) {
        for (let kk = 0; kk < k; kk++) {
          let s = 0;
          const bk = kk * m;
          const oi = i * m;
          for (let j = 0; j < m; j++) s += g[oi + j] * b.data[bk + j];
          ga[i * k + kk] += s;
        }
      }
    }
    if (b.requiresGrad || b.backwardFn) {
      const gb = b.ensureGrad();
      for (let kk = 0; kk < k; kk++) {
        const bk = kk * m;
        for (let i = 0; i < n; i++) {
          const av = a.data[i * k + kk];
          if (av === 0) continue;
          const oi = i * m;
          for (let j = 0; j < m; j++) gb[bk + j] += av * g[oi + j];
        }
      }
    }
  });
}

/**
 * Product over a subset of the contraction dimension: only `held` columns of
 * `a` (rows of `w`) participate. Identical in value and gradient to
 * multiplying by `w` with all other rows zeroed.
 */
export function matmulRowMasked(a: Tensor, w: Tensor, held: Int32Array): Tensor {
  if (a.cols !== w.rows) throw new Error(`matmulRowMasked: ${a.cols} != ${w.rows}`);
  const out = new Tensor(a.rows, w.cols);
  const n = a.rows;
  const k = a.cols;
  const m = w.cols;
  for (let i = 0; i < n; i++) {
    const ai = i * k;
    const oi = i * m;
    for (const kk of held) {
      const av = a.data[ai + kk];
      if (av === 0) continue;
      const wk = kk * m;
      for (let j = 0; j < m; j++) out.data[oi + j] += av * w.data[wk + j];
    }
  }
  return track(out, [a, w], () => {
    const g = out.grad!;
    if (a.requiresGrad || a.backwardFn) {
      const ga = a.ensureGrad();
      for (let i = 0; i < n; i++) {
        const oi = i * m;
        for (const kk of held) {
          let s = 0;
          const wk = kk * m;
          for (let j = 0; j < m; j++) s += g[oi + j] * w.data[wk + j];
          ga[i * k + kk] += s;
        }
      }
    }
    if (w.requiresGrad || w.backwardFn) {
      const gw = w.ensureGrad();
      for (const kk of held) {
        const wk = kk * m;
        for (let i = 0; i < n; i++) {
          const av = a.data[i * k + kk];
          if (av === 0) continue;
          const oi = i * m;
          for (let j = 0; j < m; j++) gw[wk + j] += av * g[oi + j];
        }
      }
    }
  });
}

/** Product with the second operand transposed (for attention scores). */
export function matmulTransposeB(a: Tensor, b: Tensor): Tensor {
  if (a.cols !== b.cols) throw new Error(`matmulTransposeB: ${a.cols} != ${b.cols}`);
  const n = a.rows;
  const k = a.cols;
  const m = b.rows;
  const out = new Tensor(n, m);
  for (let i = 0; i < n; i++) {
    const ai = i * k;
    const oi = i * m;
    for (let j = 0; j < m; j++) {
      const bj = j * k;
      let s = 0;
      for (let kk = 0; kk < k; kk++) s += a.data[ai + kk] * b.data[bj + kk];
      out.data[oi + j] = s;
    }
  }
  return track(out, [a, b], () => {
    const g = out.grad!;
    if (a.requiresGrad || a.backwardFn) {
      const ga = a.ensureGrad();
      for (let i = 0; i < n; i++) {
        const oi = i * m;
        for (let j = 0; j < m; j++) {
          const gv = g[oi + j];
          if (gv === 0) continue;
          const bj = j * k;
          for (let kk = 0; kk < k; kk++) ga[i * k + kk] += gv * b.data[bj + kk];
        }
      }
    }
    if (b.requiresGrad || b.backwardFn) {
      const gb = b.ensureGrad();
      for (let i = 0; i < n; i++) {
        const oi = i * m;
        const ai = i * k;
        for (let j = 0; j < m; j++) {
          const gv = g[oi + j];
          if (gv === 0) continue;
          for (let kk = 0; kk < k; kk++) gb[j * k + kk] += gv * a.data[ai + kk];
        }
      }
    }
  });
}

export function add(a: Tensor, b: Tensor): Tensor {
  if (a.rows !== b.rows || a.cols !== b.cols) throw new Error("add: shape mismatch");
  const out = new Tensor(a.rows, a.cols);
  for (let i = 0; i < out.data.length; i++) out.data[i] = a.data[i] + b.data[i];
  return track(out, [a, b], () => {
    const g = out.grad!;
    if (a.requiresGrad || a.backwardFn) {
      const ga = a.ensureGrad();
      for (let i = 0; i < g.length; i++) ga[i] += g[i];
    }
    if (b.requiresGrad || b.backwardFn) {
      const gb = b.ensureGrad();
      for (let i = 0; i < g.length; i++) gb[i] += g[i];
    }
  });
}

export function scale(a: Tensor, s: number): Tensor {
  const out = new Tensor(a.rows, a.cols);
  for (let i = 0; i < out.data.length; i++) out.data[i] = a.data[i] * s;
  return track(out, [a], () => {
    const g = out.grad!;
    if (a.requiresGrad || a.backwardFn) {
      const ga = a.ensureGrad();
      for (let i = 0; i < g.length; i++) ga[i] += g[i] * s;
    }
  });
}

export function sliceCols(a: Tensor, c0: number, c1: number): Tensor {
  const w = c1 - c0;
  const out = new Tensor(a.rows, w);
  for (let i = 0; i < a.rows; i++) {
    out.data.set(a.data.subarray(i * a.cols + c0, i * a.cols + c1), i * w);
  }
  return track(out, [a], () => {
    const g = out.grad!;
    if (!(a.requiresGrad || a.backwardFn)) return;
    const ga = a.ensureGrad();
    for (let i = 0; i < a.rows; i++) {
      for (let j = 0; j < w; j++) ga[i * a.cols + c0 + j] += g[i * w + j];
    }
  });
}

export function sliceRows(a: Tensor, r0: number, r1: number): Tensor {
  const h = r1 - r0;
  const out = new Tensor(h, a.cols, a.data.slice(r0 * a.cols, r1 * a.cols));
  return track(out, [a], () => {
    const g = out.grad!;
    if (!(a.requiresGrad || a.backwardFn)) return;
    const ga = a.ensureGrad();
    for (let i = 0; i < g.length; i++) ga[r0 * a.cols + i] += g[i];
  });
}

/** Gather full rows by index (used to pick each window's last token). */
export function gatherRows(a: Tensor, indices: Int32Array): Tensor {
  const out = new Tensor(indices.length, a.cols);
  indices.forEach((src, i) => {
    out.data.set(a.data.subarray(src * a.cols, (src + 1) * a.cols), i * a.cols);
  });
  return track(out, [a], () => {
    const g = out.grad!;
    if (!(a.requiresGrad || a.backwardFn)) return;
    const ga = a.ensureGrad();
    indices.forEach((src, i) => {
      for (let j = 0; j < a.cols; j++) ga[src * a.cols + j] += g[i * a.cols + j];
    });
  });
}

export function concatCols(parts: Tensor[]): Tensor {
  const rows = parts[0].rows;
  let cols = 0;
  for (const p of parts) {
    if (p.rows !== rows) throw new Error("concatCols: row mismatch");
    cols += p.cols;
  }
  const out = new Tensor(rows, cols);
  let offset = 0;
  for (const p of parts) {
    for (let i = 0; i < rows; i++) {
      out.data.set(p.data.subarray(i * p.cols, (i + 1) * p.cols), i * cols + offset);
    }
    offset += p.cols;
  }
  return track(out, [...parts], () => {
    const g = out.grad!;
    let off = 0;
    for (const p of parts) {
      if (p.requiresGrad || p.backwardFn) {
        const gp = p.ensureGrad();
        for (let i = 0; i < rows; i++) {
          for (let j = 0; j < p.cols; j++) gp[i * p.cols + j] += g[i * cols + off + j];
        }
      }
      off += p.cols;
    }
  });
}

export function softmaxRows(a: Tensor): Tensor {
  const out = new Tensor(a.rows, a.cols);
  const m = a.cols;
  for (let i = 0; i < a.rows; i++) {
    const base = i * m;
    let max = -Infinity;
    for (let j = 0; j < m; j++) max = Math.max(max, a.data[base + j]);
    let sum = 0;
    for (let j = 0; j < m; j++) {
      const e = Math.exp(a.data[base + j] - max);
      out.data[base + j] = e;
      sum += e;
    }
    for (let j = 0; j < m; j++) out.data[base + j] /= sum;
  }
  return track(out, [a], () => {
    const g = out.grad!;
    if (!(a.requiresGrad || a.backwardFn)) return;
    const ga = a.ensureGrad();
    for (let i = 0; i < a.rows; i++) {
      const base = i * m;
      let dot = 0;
      for (let j = 0; j < m; j++) dot += g[base + j] * out.data[base + j];
      for (let j = 0; j < m; j++) {
        ga[base + j] += out.data[base + j] * (g[base + j] - dot);
      }
    }
  });
}

const GELU_C = Math.sqrt(2 / Math.PI);
const GELU_A = 0.044715;

export function activation(a: Tensor, kind: "relu" | "gelu"): Tensor {
  const out = new Tensor(a.rows, a.cols);
  if (kind === "relu") {
    for (let i = 0; i < a.data.length; i++) out.data[i] = Math.max(0, a.data[i]);
  } else {
    for (let i = 0; i < a.data.length; i++) {
      const x = a.data[i];
      out.data[i] = 0.5 * x * (1 + Math.tanh(GELU_C * (x + GELU_A * x * x * x)));
    }
  }
  return track(out, [a], () => {
    const g = out.grad!;
    if (!(a.requiresGrad || a.backwardFn)) return;
    const ga = a.ensureGrad();
    for (let i = 0; i < a.data.length; i++) {
      const x = a.data[i];
      if (kind === "relu") {
        ga[i] += x > 0 ? g[i] : 0;
      } else {
        const u = GELU_C * (x + GELU_A * x * x * x);
        const t = Math.tanh(u);
        const du = GELU_C * (1 + 3 * GELU_A * x * x);
        ga[i] += g[i] * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du);
      }
    }
  });
}

/**
 * Row layernorm whose statistics and output cover only `statCols`; all other
 * output entries are zero and propagate no gradient (a device neither reads
 * nor writes columns it does not hold).
 */
export function layernormCols(
  x: Tensor,
  statCols: Int32Array,
  gamma: Tensor,
  beta: Tensor,
  eps = 1e-5,
): Tensor {
  const m = statCols.length;
  if (m === 0) throw new Error("layernormCols: empty stat column set");
  if (gamma.data.length !== x.cols || beta.data.length !== x.cols) {
    throw new Error("layernormCols: gamma/beta length mismatch");
  }
  const out = new Tensor(x.rows, x.cols);
  const xhat = new Float64Array(x.rows * m);
  const invStd = new Float64Array(x.rows);
  for (let i = 0; i < x.rows; i++) {
    const base = i * x.cols;
    let mean = 0;
    for (const c of statCols) mean += x.data[base + c];
    mean /= m;
    let variance = 0;
    for (const c of statCols) {
      const d = x.data[base + c] - mean;
      variance += d * d;
    }
    variance /= m;
    const inv = 1 / Math.sqrt(variance + eps);
    invStd[i] = inv;
    for (let j = 0; j < m; j++) {
      const c = statCols[j];
      const h = (x.data[base + c] - mean) * inv;
      xhat[i * m + j] = h;
      out.data[base + c] = h * gamma.data[c] + beta.data[c];
    }
  }
  return track(out, [x, gamma, beta], () => {
    const g = out.grad!;
    const gGamma = gamma.requiresGrad || gamma.backwardFn ? gamma.ensureGrad() : null;
    const gBeta = beta.requiresGrad || beta.backwardFn ? beta.ensureGrad() : null;
    const gx = x.requiresGrad || x.backwardFn ? x.ensureGrad() : null;
    for (let i = 0; i < x.rows; i++) {
      const base = i * x.cols;
      let meanDh = 0;
      let meanDhXhat = 0;
      for (let j = 0; j < m; j++) {
        const c = statCols[j];
        const gy = g[base + c];
        const h = xhat[i * m + j];
        if (gGamma) gGamma[c] += gy * h;
        if (gBeta) gBeta[c] += gy;
        const dh = gy * gamma.data[c];
        meanDh += dh;
        meanDhXhat += dh * h;
      }
      if (!gx) continue;
      meanDh /= m;
      meanDhXhat /= m;
      for (let j = 0; j < m; j++) {
        const c = statCols[j];
        const dh = g[base + c] * gamma.data[c];
        gx[base + c] += invStd[i] * (dh - meanDh - xhat[i * m + j] * meanDhXhat);
      }
    }
  });
}

/** Mean squared error against a constant target. */
export function mseLoss(pred: Tensor, target: Float64Array): Tensor {
  if (pred.data.length !== target.length) throw new Error("mseLoss: length mismatch");
  const out = new Tensor(1, 1);
  const n = target.length;
  let sum = 0;
  for (let i = 0; i < n; i++) {
    const d = pred.data[i] - target[i];
    sum += d * d;
  }
  out.data[0] = sum / n;
  return track(out, [pred], () => {
    const g = out.grad![0];
    if (!(pred.requiresGrad || pred.backwardFn)) return;
    const gp = pred.ensureGrad();
    for (let i = 0; i < n; i++) gp[i] += (2 / n) * (pred.data[i] - target[i]) * g;
  });
}
