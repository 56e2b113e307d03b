/** Adam optimizer with a cosine learning-rate schedule. */

import { Tensor } from "./autograd.js";

export class Adam {
  private readonly params: Tensor[];
  private readonly m: Float64Array[];
  private readonly v: Float64Array[];
  private step = 0;

  constructor(
    params: Tensor[],
    private readonly baseLr: number,
    private readonly totalSteps: number,
    private readonly beta1 = 0.9,
    private readonly beta2 = 0.999,
    private readonly eps = 1e-8,
  ) {
    this.params = params;
    this.m = params.map((p) => new Float64Array(p.data.length));
    this.v = params.map((p) => new Float64Array(p.data.length));
  }

  /** Cosine decay from baseLr to zero over totalSteps. */
  currentLr(): number {
    const t = Math.min(this.step, this.totalSteps);
    return this.baseLr * 0.5 * (1 + Math.cos((Math.PI * t) / this.totalSteps));
  }

  update(): void {
    this.step++;
    const lr = this.currentLr();
    const c1 = 1 - Math.pow(this.beta1, this.step);
    const c2 = 1 - Math.pow(this.beta2, this.step);
    this.params.forEach((p, idx) => {
      const g = p.grad;
      if (!g) return;
      const m = this.m[idx];
      const v = this.v[idx];
      for (let i = 0; i < p.data.length; i++) {
        m[i] = this.beta1 * m[i] + (1 - this.beta1) * g[i];
        v[i] = this.beta2 * v[i] + (1 - this.beta2) * g[i] * g[i];
        p.data[i] -= (lr * (m[i] / c1)) / (Math.sqrt(v[i] / c2) + this.eps);
      }
    });
  }

  zeroGrads(): void {
    for (const p of this.params) p.grad = null;
  }
}
