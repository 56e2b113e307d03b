"""Command-line entry point.

Subcommands: plan, simulate, sweep-feasibility, sweep-latency,
sweep-robustness, dump-bundle. All randomness flows from --seed, so every
command is reproducible; output files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile

import numpy as np

from . import bundle as bundle_io
from . import latency as lat
from . import resources as res
from .config import TransformerConfig
from .errors import MeshInferError
from .executor import run_inference
from .kernels import DTYPE
from .mesh import LossModel
from .model import ModelBundle, forward_virtual_devices, random_bundle
from .partition import build_partition, build_pruned_spec, shard_weights


def _atomic_write(path: str, write_fn) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit_json(data: dict, out: str | None) -> None:
    text = json.dumps(data, indent=2)
    if out:
        _atomic_write(out, lambda fh: fh.write(text + "\n"))
    else:
        print(text)


def _load_config(args) -> TransformerConfig:
    cfg = TransformerConfig.from_json_file(args.config)
    return cfg.with_overrides(devices=getattr(args, "devices", None))


def _load_or_make_bundle(args) -> ModelBundle:
    if getattr(args, "bundle", None):
        b = bundle_io.read_bundle(args.bundle)
        if getattr(args, "devices", None):
            b.config = b.config.with_overrides(devices=args.devices)
            b.validate()
        return b
    if getattr(args, "config", None):
        cfg = _load_config(args)
        b = random_bundle(cfg, seed=args.seed)
        ratio = getattr(args, "ratio", 0.0) or 0.0
        if ratio > 0:
            b.prune = build_pruned_spec(b, build_partition(cfg), ratio)
        return b
    raise MeshInferError("either --bundle or --config is required")


def _loss_model(args) -> LossModel:
    return LossModel(p_pair=args.loss_pair, p_rx_blackout=args.loss_rx,
                     p_tx_blackout=args.loss_tx, seed=args.seed)


def _seeded_input(cfg: TransformerConfig, seed: int):
    rng = np.random.default_rng(seed ^ 0x1A2B3C4D)
    return rng.standard_normal((cfg.tokens, cfg.features)).astype(DTYPE)


def _resolve_input(cfg: TransformerConfig, args):
    if getattr(args, "input", None):
        x = np.loadtxt(args.input, delimiter=",", dtype=np.float64, ndmin=2)
        return np.ascontiguousarray(x, dtype=DTYPE)
    return _seeded_input(cfg, args.seed)


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    partition = build_partition(cfg)
    ratio = args.ratio or 0.0
    report = res.resource_report(cfg, ratio)
    if args.out and args.out.endswith(".csv"):
        fields = ["devices", "ratio", *report.to_dict().keys()]
        row = {"devices": cfg.devices, "ratio": ratio, **report.to_dict()}

        def write(fh):
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerow(row)

        _atomic_write(args.out, write)
        return 0
    _emit_json({
        "config": cfg.to_dict(),
        "ratio": ratio,
        "partition": {
            "cols_per_device": partition.cols_per_device,
            "head_map": [list(h) for h in partition.head_map],
            "col_ranges": [list(r) for r in partition.col_ranges],
        },
        "per_device": report.to_dict(),
    }, args.out)
    return 0


def cmd_simulate(args) -> int:
    bundle = _load_or_make_bundle(args)
    cfg = bundle.config
    partition = build_partition(cfg)
    shards = shard_weights(bundle, partition)
    x1 = _resolve_input(cfg, args)
    loss = _loss_model(args)
    report = run_inference(shards, bundle.prune, loss, x1)
    if args.trace:
        _atomic_write(args.trace,
                      lambda fh: fh.writelines(line + "\n" for line in report.trace_lines()))
    result = report.to_dict(include_output=True)
    result["seed"] = args.seed
    result["loss"] = {"p_pair": loss.p_pair, "p_rx_blackout": loss.p_rx_blackout,
                      "p_tx_blackout": loss.p_tx_blackout}
    if args.oracle_check:
        oracle = forward_virtual_devices(bundle, partition, x1)
        max_dev = float(np.max(np.abs(report.output - oracle))) if oracle.size else 0.0
        result["oracle_max_dev"] = max_dev
        lossless = (loss.p_pair == 0 and loss.p_rx_blackout == 0 and loss.p_tx_blackout == 0)
        print(f"max_dev={max_dev}")
        if lossless and max_dev != 0.0:
            _emit_json(result, args.out)
            print("error: lossless output deviates from the oracle", file=sys.stderr)
            return 1
    _emit_json(result, args.out)
    return 0


def cmd_sweep_feasibility(args) -> int:
    cfg = _load_config(args)
    budget = res.DeviceBudget(flash_bytes=args.budget_flash, ram_bytes=args.budget_ram)
    tokens = range(args.n_min, args.n_max + 1, args.n_step)
    points = res.feasibility_boundary(budget, cfg, tokens, ratio=args.ratio or 0.0)
    out = args.out or "boundary.csv"

    def write(fh):
        writer = csv.writer(fh)
        writer.writerow(["N", "F_max", "binding_constraint"])
        for p in points:
            writer.writerow([p.tokens, p.max_features, p.binding_constraint])

    _atomic_write(out, write)
    print(f"wrote {len(points)} boundary points to {out}")
    return 0


def cmd_sweep_latency(args) -> int:
    cfg = _load_config(args)
    params = lat.LatencyParams()
    device_counts = [int(v) for v in args.devices_list.split(",")]
    ratios = [float(v) for v in args.ratios.split(",")]
    rows = []
    for d in device_counts:
        for ratio in ratios:
            for block in ("attention", "residual"):
                rows.append({
                    "devices": d,
                    "ratio": ratio,
                    "block": block,
                    "compute_s": lat.compute_latency(cfg, d, ratio, params, block),
                    "comm_s": lat.comm_latency(cfg, d, ratio, params, block),
                    "speedup": lat.speedup(cfg, d, ratio, params, block),
                })
    out = args.out or "latency.csv"

    def write(fh):
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    _atomic_write(out, write)
    print(f"wrote {len(rows)} latency points to {out}")
    return 0


def cmd_sweep_robustness(args) -> int:
    bundle = _load_or_make_bundle(args)
    cfg = bundle.config
    partition = build_partition(cfg)
    shards = shard_weights(bundle, partition)
    x1 = _seeded_input(cfg, args.seed)
    clean = run_inference(shards, bundle.prune, LossModel(seed=args.seed), x1).output
    losses = [float(v) for v in args.losses.split(",")]
    rows = []
    for loss_pct in losses:
        for s in range(args.seeds):
            lm = LossModel(p_pair=loss_pct / 100.0, seed=args.seed + 1000 + s)
            out = run_inference(shards, bundle.prune, lm, x1).output
            dev = float(np.mean((out - clean) ** 2))
            rows.append({"loss_pct": loss_pct, "seed": args.seed + 1000 + s,
                         "output_mse": dev})
    out_path = args.out or "robustness.csv"

    def write(fh):
        writer = csv.DictWriter(fh, fieldnames=["loss_pct", "seed", "output_mse"])
        writer.writeheader()
        writer.writerows(rows)

    _atomic_write(out_path, write)
    print(f"wrote {len(rows)} robustness points to {out_path}")
    return 0


def cmd_dump_bundle(args) -> int:
    bundle = bundle_io.read_bundle(args.bundle)
    data = {
        "config": bundle.config.to_dict(),
        "layer_count": len(bundle.layers),
        "metadata": bundle.metadata,
        "has_masks": bundle.prune is not None,
    }
    if bundle.prune is not None:
        data["mask_sparsity"] = bundle.prune.sparsity()
        data["mask_zeros_per_site"] = {
            f"layer{layer}/{site}": int(m.size - m.sum())
            for (layer, site), m in sorted(bundle.prune.masks.items())
        }
    if args.weights:
        data["layers"] = [
            {
                "w_q": lw.w_q.tolist(), "w_k": lw.w_k.tolist(),
                "w_v": lw.w_v.tolist(), "w_o": lw.w_o.tolist(),
                "mlp": [w.tolist() for w in lw.mlp],
                "ln1_gamma": lw.ln1_gamma.tolist(), "ln1_beta": lw.ln1_beta.tolist(),
                "ln2_gamma": lw.ln2_gamma.tolist(), "ln2_beta": lw.ln2_beta.tolist(),
            }
            for lw in bundle.layers
        ]
    _emit_json(data, args.out)
    return 0


def _add_loss_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss-pair", type=float, default=0.0,
                   help="probability a (sender, receiver) payload is lost")
    p.add_argument("--loss-rx", type=float, default=0.0,
                   help="probability a device receives nothing in a round")
    p.add_argument("--loss-tx", type=float, default=0.0,
                   help="probability a device's payload reaches no one")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshinfer",
        description="Distributed transformer inference simulator for lossy mesh networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="validate a config and report per-device resources")
    p.add_argument("--config", required=True)
    p.add_argument("--devices", type=int)
    p.add_argument("--ratio", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("simulate", help="run a distributed inference")
    p.add_argument("--bundle", help="bundle file; omit to use a seeded random bundle")
    p.add_argument("--config", help="config JSON (used when no bundle is given)")
    p.add_argument("--devices", type=int)
    p.add_argument("--ratio", type=float, default=0.0,
                   help="pruning ratio for generated bundles")
    p.add_argument("--input", help="input matrix CSV (tokens x features); "
                                   "default is a seeded random input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-check", action="store_true",
                   help="also run the centralized oracle and print the max deviation")
    p.add_argument("--trace", help="write per-round traces as JSON lines")
    p.add_argument("--out")
    _add_loss_flags(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep-feasibility", help="boundary of feasible model sizes")
    p.add_argument("--config", required=True)
    p.add_argument("--devices", type=int)
    p.add_argument("--ratio", type=float, default=0.0)
    p.add_argument("--budget-flash", type=int, default=1024 * 1024)
    p.add_argument("--budget-ram", type=int, default=256 * 1024)
    p.add_argument("--n-min", type=int, default=8)
    p.add_argument("--n-max", type=int, default=1024)
    p.add_argument("--n-step", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep_feasibility)

    p = sub.add_parser("sweep-latency", help="latency model over devices and ratios")
    p.add_argument("--config", required=True)
    p.add_argument("--devices-list", default="1,2,4,8,16")
    p.add_argument("--ratios", default="0.0,0.3,0.6,0.9")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep_latency)

    p = sub.add_parser("sweep-robustness", help="output deviation versus message loss")
    p.add_argument("--bundle")
    p.add_argument("--config")
    p.add_argument("--devices", type=int)
    p.add_argument("--ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=10, help="seeds per sweep point")
    p.add_argument("--losses", default="0,1,2,5,10")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep_robustness)

    p = sub.add_parser("dump-bundle", help="summarize a bundle file as JSON")
    p.add_argument("--bundle", required=True)
    p.add_argument("--weights", action="store_true", help="include full weights")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_dump_bundle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MeshInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
