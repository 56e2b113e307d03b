/**
 * Binary model-bundle writer/reader, byte-compatible with the inference
 * simulator: magic "CATS", version 1, little-endian u32 header, raw row-major
 * float32 weights per layer, optional mask section (one byte per bit), then a
 * length-prefixed UTF-8 metadata map. The trainer-local in/out heads are
 * stashed in metadata (base64 float32) so evaluation can rebuild the full
 * regression model; the simulator ignores unknown metadata keys.
 */

import { Tensor } from "./autograd.js";
import { LayerParams, ModelParams, mlpShapes } from "./model.js";
import {
  ModelConfig,
  PruneMasks,
  allOnesMasks,
  gatherSites,
  maskKey,
} from "./sites.js";

export const MAGIC = "CATS";
export const VERSION = 1;
const ACTIVATIONS = ["relu", "gelu"] as const;

class ByteWriter {
  private chunks: Buffer[] = [];

  u32(v: number): void {
    const b = Buffer.alloc(4);
    b.writeUInt32LE(v >>> 0);
    this.chunks.push(b);
  }

  raw(b: Buffer): void {
    this.chunks.push(b);
  }

  f32Array(data: Float64Array): void {
    const f = new Float32Array(data.length);
    for (let i = 0; i < data.length; i++) f[i] = Math.fround(data[i]);
    this.chunks.push(Buffer.from(f.buffer, 0, f.byteLength));
  }

  done(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

function tensorToBase64(t: Tensor): string {
  const f = new Float32Array(t.data.length);
  for (let i = 0; i < t.data.length; i++) f[i] = Math.fround(t.data[i]);
  return Buffer.from(f.buffer, 0, f.byteLength).toString("base64");
}

function tensorFromBase64(rows: number, cols: number, b64: string): Tensor {
  const buf = Buffer.from(b64, "base64");
  const f = new Float32Array(buf.buffer, buf.byteOffset, buf.byteLength / 4);
  return Tensor.from(rows, cols, f);
}

export function encodeBundle(
  params: ModelParams,
  cfg: ModelConfig,
  masks: PruneMasks | null,
  metadata: Record<string, string>,
): Buffer {
  const w = new ByteWriter();
  w.raw(Buffer.from(MAGIC, "ascii"));
  w.u32(VERSION);
  w.u32(cfg.layers);
  w.u32(cfg.features);
  w.u32(cfg.heads);
  w.u32(cfg.tokens);
  w.u32(cfg.mlpHidden);
  w.u32(cfg.mlpLayers);
  w.u32(ACTIVATIONS.indexOf(cfg.activation));
  w.u32(cfg.devices);
  w.u32(cfg.bytesPerElement);
  for (const layer of params.layers) {
    for (const t of [layer.wq, layer.wk, layer.wv, layer.wo, ...layer.mlp]) {
      w.f32Array(t.data);
    }
    for (const t of [layer.ln1Gamma, layer.ln1Beta, layer.ln2Gamma, layer.ln2Beta]) {
      w.f32Array(t.data);
    }
  }
  if (masks === null) {
    w.raw(Buffer.from([0]));
  } else {
    w.raw(Buffer.from([1]));
    for (let layer = 0; layer < cfg.layers; layer++) {
      for (const site of gatherSites(cfg)) {
        const perDev = masks.get(maskKey(layer, site.name));
        if (!perDev) throw new Error(`missing mask for layer ${layer}, site ${site.name}`);
        for (const m of perDev) w.raw(Buffer.from(m));
      }
    }
  }

  const head = {
    head_in: tensorToBase64(params.wIn),
    head_out: tensorToBase64(params.wOut),
    patch: String(params.wIn.rows),
  };
  const all = { ...metadata, ...head };
  w.u32(Object.keys(all).length);
  for (const [key, value] of Object.entries(all)) {
    const kb = Buffer.from(key, "utf-8");
    const vb = Buffer.from(value, "utf-8");
    w.u32(kb.length);
    w.raw(kb);
    w.u32(vb.length);
    w.raw(vb);
  }
  return w.done();
}

export interface DecodedBundle {
  cfg: ModelConfig;
  params: ModelParams;
  masks: PruneMasks | null;
  metadata: Record<string, string>;
}

class ByteReader {
  private offset = 0;

  constructor(private readonly buf: Buffer) {}

  take(n: number, what: string): Buffer {
    if (this.offset + n > this.buf.length) {
      throw new Error(`bundle truncated while reading ${what}`);
    }
    const out = this.buf.subarray(this.offset, this.offset + n);
    this.offset += n;
    return out;
  }

  u32(what: string): number {
    return this.take(4, what).readUInt32LE(0);
  }

  f32Tensor(rows: number, cols: number, what: string): Tensor {
    const raw = this.take(4 * rows * cols, what);
    const aligned = Buffer.from(raw);  // copy for alignment
    const f = new Float32Array(aligned.buffer, aligned.byteOffset, rows * cols);
    return Tensor.from(rows, cols, f);
  }

  atEnd(): boolean {
    return this.offset === this.buf.length;
  }
}

export function decodeBundle(buf: Buffer): DecodedBundle {
  const r = new ByteReader(buf);
  if (r.take(4, "magic").toString("ascii") !== MAGIC) throw new Error("bad bundle magic");
  const version = r.u32("version");
  if (version !== VERSION) throw new Error(`unsupported bundle version ${version}`);
  const cfg: ModelConfig = {
    layers: r.u32("layers"),
    features: r.u32("features"),
    heads: r.u32("heads"),
    tokens: r.u32("tokens"),
    mlpHidden: r.u32("mlp_hidden"),
    mlpLayers: r.u32("mlp_layers"),
    activation: ACTIVATIONS[r.u32("activation")],
    devices: r.u32("devices"),
    bytesPerElement: r.u32("bytes_per_element"),
  };
  const f = cfg.features;
  const layers: LayerParams[] = [];
  for (let li = 0; li < cfg.layers; li++) {
    const wq = r.f32Tensor(f, f, "w_q");
    const wk = r.f32Tensor(f, f, "w_k");
    const wv = r.f32Tensor(f, f, "w_v");
    const wo = r.f32Tensor(f, f, "w_o");
    const mlp = mlpShapes(cfg).map(([rows, cols]) => r.f32Tensor(rows, cols, "mlp"));
    const vecs = Array.from({ length: 4 }, () => r.f32Tensor(1, f, "layernorm"));
    layers.push({
      wq, wk, wv, wo, mlp,
      ln1Gamma: vecs[0], ln1Beta: vecs[1], ln2Gamma: vecs[2], ln2Beta: vecs[3],
    });
  }
  const flag = r.take(1, "mask flag")[0];
  let masks: PruneMasks | null = null;
  if (flag === 1) {
    masks = allOnesMasks(cfg);
    for (let layer = 0; layer < cfg.layers; layer++) {
      for (const site of gatherSites(cfg)) {
        const perDev: Uint8Array[] = [];
        for (let dev = 0; dev < cfg.devices; dev++) {
          perDev.push(Uint8Array.from(r.take(site.perDevice, "mask bytes")));
        }
        masks.set(maskKey(layer, site.name), perDev);
      }
    }
  } else if (flag !== 0) {
    throw new Error(`mask flag must be 0 or 1, got ${flag}`);
  }
  const metadata: Record<string, string> = {};
  const count = r.u32("metadata count");
  for (let i = 0; i < count; i++) {
    const key = r.take(r.u32("key length"), "key").toString("utf-8");
    metadata[key] = r.take(r.u32("value length"), "value").toString("utf-8");
  }
  if (!r.atEnd()) throw new Error("trailing data after metadata");

  const patch = Number(metadata.patch ?? "0");
  const params: ModelParams = {
    layers,
    wIn: metadata.head_in
      ? tensorFromBase64(patch, f, metadata.head_in)
      : Tensor.param(1, f, () => 0),
    wOut: metadata.head_out
      ? tensorFromBase64(f, patch, metadata.head_out)
      : Tensor.param(f, 1, () => 0),
  };
  return { cfg, params, masks, metadata };
}
