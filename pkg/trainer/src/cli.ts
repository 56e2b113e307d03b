/**
 * Trainer entry point.
 *
 *   node dist/src/cli.js train --spec spec.json --out model.bundle
 *   node dist/src/cli.js evaluate --bundle model.bundle --spec spec.json \
 *        --losses 0,1,5,10 --seeds 10 --out eval.csv
 */

import { readFileSync, writeFileSync } from "node:fs";
import { pathToFileURL } from "node:url";

import { decodeBundle, encodeBundle } from "./bundle.js";
import { loadSeries, makeDataset } from "./data.js";
import { evaluateSweep, writeEvalCsv } from "./evaluate.js";
import { Rng } from "./rng.js";
import { allOnesMasks, maskSparsity } from "./sites.js";
import { parseTrainSpec, trainFromSpec } from "./train.js";

function parseArgs(argv: string[]): Map<string, string> {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed arguments near ${argv[i]}`);
    }
    args.set(argv[i].slice(2), argv[i + 1]);
  }
  return args;
}

function require_(args: Map<string, string>, name: string): string {
  const v = args.get(name);
  if (v === undefined) throw new Error(`missing required --${name}`);
  return v;
}

function cmdTrain(args: Map<string, string>): void {
  const spec = parseTrainSpec(JSON.parse(readFileSync(require_(args, "spec"), "utf-8")));
  if (args.has("seed")) spec.seed = Number(args.get("seed"));
  const out = require_(args, "out");
  const t0 = Date.now();
  const result = trainFromSpec(spec);
  const metadata = {
    generator: "trainer",
    seed: String(spec.seed),
    final_train_loss: String(result.history[result.history.length - 1]),
  };
  const exportMasks = spec.prune && spec.prune.targetRatio > 0
    ? result.masks
    : allOnesMasks(spec.config);
  writeFileSync(out, encodeBundle(result.params, spec.config, exportMasks, metadata));
  console.log(`trained in ${((Date.now() - t0) / 1000).toFixed(1)}s, ` +
              `final loss ${result.history[result.history.length - 1].toExponential(3)}, ` +
              `mask sparsity ${maskSparsity(result.masks).toFixed(3)}, wrote ${out}`);
  if (args.has("eval-csv")) {
    const rows = evaluateSweep(result.params, spec.config, result.dataset, result.masks,
                               [0, 1, 2, 5, 10]);
    writeEvalCsv(rows, args.get("eval-csv")!);
    console.log(`wrote evaluation sweep to ${args.get("eval-csv")}`);
  }
}

function cmdEvaluate(args: Map<string, string>): void {
  const raw = readFileSync(require_(args, "bundle"));
  const { cfg, params, masks } = decodeBundle(raw);
  const spec = parseTrainSpec(JSON.parse(readFileSync(require_(args, "spec"), "utf-8")));
  const series = loadSeries(spec.dataset, new Rng(spec.seed).fork(1));
  const dataset = makeDataset(series, cfg.tokens, spec.patch);
  const losses = (args.get("losses") ?? "0,1,2,5,10").split(",").map(Number);
  const seeds = Number(args.get("seeds") ?? "10");
  const rows = evaluateSweep(params, cfg, dataset, masks ?? allOnesMasks(cfg),
                             losses, seeds);
  const out = args.get("out") ?? "eval.csv";
  writeEvalCsv(rows, out);
  console.log(`wrote ${rows.length} evaluation rows to ${out}`);
}

export function main(argv: string[]): number {
  try {
    const [command, ...rest] = argv;
    const args = parseArgs(rest);
    if (command === "train") {
      cmdTrain(args);
    } else if (command === "evaluate") {
      cmdEvaluate(args);
    } else {
      console.error("usage: cli.js <train|evaluate> [--flag value ...]");
      return 2;
    }
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}
