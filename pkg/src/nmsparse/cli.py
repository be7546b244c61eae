"""``nmsparse`` command line: train, sweep, cost, report, pack, export-data.

Exit codes: 0 ok, 1 config error, 2 training divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from . import cost, storage
from .config import (
    ConfigError,
    RunConfig,
    build_run_config,
    load_run_config,
    parse_overrides,
    parse_value,
    read_pairs,
)
from .model import ModelConfig, generate_task, reverse_target
from .nm import NmPattern, SparsityMask
from .schedule import Recipe
from .trainer import TrainingDiverged, iter_metrics, load_checkpoint, train

log = logging.getLogger("nmsparse")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
DEFAULT_MAX_RUNS = 64


# -- train ---------------------------------------------------------------------------


def run_training(cfg: RunConfig) -> dict:
    """Train one config into its output directory; returns the final metric record."""
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())
    echo = cfg.to_flat()
    echo["run_id"] = cfg.run_id()
    result = train(
        cfg.model,
        cfg.task,
        cfg.schedule,
        cfg.optimizer,
        seed=cfg.seed,
        train_config=cfg.train,
        out_dir=out,
        config_echo=echo,
    )
    summary = {"run_id": cfg.run_id(), **result.final}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, parse_overrides(args.set))
    if args.output_dir:
        cfg.output_dir = args.output_dir
    log.info("training %s -> %s", cfg.schedule.recipe.value, cfg.resolved_output_dir())
    summary = run_training(cfg)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------------


def expand_sweep(pairs: dict[str, str]) -> tuple[dict[str, str], list[dict[str, Any]], dict[str, Any]]:
    """Split a sweep file into base pairs, the list of override cells, and sweep options."""
    base, axes, opts = {}, {}, {"max_runs": DEFAULT_MAX_RUNS, "workers": 1}
    for key, value in pairs.items():
        if key.startswith("sweep."):
            name = key[len("sweep.") :]
            if name in opts:
                opts[name] = parse_value(value)
            else:
                axes[name] = [parse_value(v) for v in value.split(",") if v.strip()]
        else:
            base[key] = value
    names = sorted(axes)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    if len(cells) > opts["max_runs"]:
        raise ConfigError(f"sweep expands to {len(cells)} runs, above sweep.max_runs={opts['max_runs']}")
    return base, cells, opts


def _cell_name(i: int, cell: dict[str, Any]) -> str:
    parts = [f"{k.split('.')[-1]}={v}" for k, v in cell.items()]
    return f"cell{i:03d}" + ("_" + "_".join(parts) if parts else "")


def _run_cell(cfg: RunConfig) -> dict:
    try:
        return {"status": "ok", **run_training(cfg)}
    except TrainingDiverged as exc:
        return {"status": "diverged", "error": str(exc), "step": exc.step}


def cmd_sweep(args) -> int:
    spec = Path(args.spec)
    try:
        pairs = read_pairs(spec.read_text(), str(spec))
    except OSError as exc:
        raise ConfigError(f"cannot read sweep spec {spec}: {exc}") from None
    base, cells, opts = expand_sweep(pairs)
    base_cfg = build_run_config(base)
    root = Path(args.output_dir) if args.output_dir else base_cfg.resolved_output_dir()
    configs = []
    for i, cell in enumerate(cells):
        merged = {**base, **{k: str(v) for k, v in cell.items()}}
        merged["output_dir"] = str(root / _cell_name(i, cell))
        configs.append(build_run_config(merged))

    workers = max(1, int(opts["workers"]))
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = [_run_cell(c) for c in configs]

    rows = [{"cell": _cell_name(i, cell), **cell, **res} for i, (cell, res) in enumerate(zip(cells, results))]
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    axis_cols = sorted({k for cell in cells for k in cell})
    table = format_table(rows, ["cell", *axis_cols, "status", "val_loss", "token_acc", "seq_acc", "density"])
    (root / "sweep.txt").write_text(table)
    print(table, end="")
    ok = [r for r in rows if r["status"] == "ok"]
    if len(ok) > 1:
        losses = [r["val_loss"] for r in ok]
        print(f"max - min final val_loss across cells: {max(losses) - min(losses):.4f}")
    return EXIT_OK


# -- cost ------------------------------------------------------------------------------


def cmd_cost(args) -> int:
    if args.config:
        model = load_run_config(args.config).model
    elif args.preset == "desk":
        model = ModelConfig()
    else:
        model = ModelConfig.large()
    vocab = args.vocab if args.vocab is not None else (cost.DEFAULT_VOCAB if args.preset == "large" and not args.config else model.vocab)
    report = cost.count_costs(model, seq_len=args.seq_len, vocab=vocab, scope=args.scope)
    record: dict[str, Any] = {"model": asdict(model), "cost": report.to_record()}
    lines = [
        f"model: {model.enc_layers}+{model.dec_layers} layers, d_model={model.d_model}, d_ff={model.d_ff}, heads={model.heads}",
        f"assumptions: seq_len={report.seq_len} vocab={report.vocab} scope={report.scope}; {report.convention}",
        f"{'component':<20}{'params':>16}{'fwd FLOPs/seq':>20}",
    ]
    for comp in cost.COMPONENTS:
        lines.append(f"{comp:<20}{report.params[comp]:>16,}{report.flops[comp]:>20,}")
    lines.append(f"{'total':<20}{report.total_params:>16,}{report.total_flops:>20,}")
    lines.append(f"ff_param_share ({report.scope}) = {report.ff_param_share:.4f}")
    lines.append(f"ff_flops_share ({report.scope}) = {report.ff_flops_share:.4f}")
    lines.append(f"whole-model shares: params {report.model_ff_param_share:.4f}, flops {report.model_ff_flops_share:.4f}")
    if args.pattern:
        pattern = NmPattern.parse(args.pattern)
        comp = cost.compression(report, pattern, value_bits=args.value_bits)
        record["compression"] = comp.to_record()
        ratio = comp.inference_flops_reduction_fraction / (1 - pattern.density()) if pattern.density() < 1 else float("nan")
        lines += [
            f"compression at {pattern}:",
            f"  inference FLOPs reduction = {comp.inference_flops_reduction_fraction:.4f}",
            f"  model size reduction      = {comp.size_reduction_fraction:.4f} "
            f"(without index overhead {comp.size_reduction_no_index_fraction:.4f})",
            f"  index overhead            = {comp.overhead_bits_per_group} bits per {pattern.group_m}-group",
            f"  identity check: flops_reduction/(1-N/M) = {ratio:.6f} vs ff_flops_share = {report.ff_flops_share:.6f}"
            f" -> {'ok' if math.isclose(ratio, report.ff_flops_share, rel_tol=1e-12) else 'MISMATCH'}",
        ]
    if args.json:
        print(json.dumps(record, sort_keys=True))
    else:
        print("\n".join(lines))
    return EXIT_OK


# -- report ----------------------------------------------------------------------------


def _recipe_rank(name: str) -> int:
    order = [r.value for r in Recipe]
    return order.index(name) if name in order else len(order)


def collect_run(run_dir: Path) -> dict | None:
    """Final metrics plus config-derived columns for one run directory, or None if unusable."""
    cfg_path, metrics_path = run_dir / "config.cfg", run_dir / "metrics.jsonl"
    try:
        cfg = load_run_config(cfg_path)
    except ConfigError as exc:
        log.warning("skipping %s: %s", run_dir, exc)
        return None
    try:
        records = list(iter_metrics(metrics_path))
    except (OSError, ValueError) as exc:
        log.warning("skipping %s: corrupt or missing metrics file %s (%s)", run_dir, metrics_path, exc)
        return None
    finals = [r for r in records if "error" not in r and r.get("step") == cfg.schedule.total_steps]
    if not finals:
        log.warning("skipping %s: no final metrics record", run_dir)
        return None
    final = finals[-1]
    report = cost.count_costs(cfg.model, seq_len=cfg.task.max_len + 1, vocab=cfg.model.vocab, scope="model")
    avg, _ = cost.avg_training_flops(cfg.schedule, report, cfg.train.batch_size)
    return {
        "run_id": cfg.run_id(),
        "recipe": cfg.schedule.recipe.value,
        "target": str(cfg.schedule.target_pattern),
        "seed": cfg.seed,
        "val_loss": final["val_loss"],
        "token_acc": final["token_acc"],
        "seq_acc": final["seq_acc"],
        "density": final["density"],
        "avg_train_flops": avg,
        "dir": str(run_dir),
    }


def build_report(run_dirs: list[Path]) -> list[dict]:
    rows: dict[str, dict] = {}
    for d in run_dirs:
        row = collect_run(Path(d))
        if row is not None and row["run_id"] not in rows:
            rows[row["run_id"]] = row
    return sorted(
        rows.values(),
        key=lambda r: (_recipe_rank(r["recipe"]), -NmPattern.parse(r["target"]).density(), r["seed"], r["run_id"]),
    )


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4g}" if abs(v) >= 1e5 else f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict], columns: list[str]) -> str:
    body = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


REPORT_COLUMNS = ["recipe", "target", "seed", "val_loss", "token_acc", "seq_acc", "density", "avg_train_flops"]


def cmd_report(args) -> int:
    rows = build_report([Path(d) for d in args.runs])
    if not rows:
        log.error("no completed runs among %d directories", len(args.runs))
        return EXIT_IO
    if args.json:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    else:
        print(format_table(rows, REPORT_COLUMNS), end="")
    return EXIT_OK


# -- pack / export -----------------------------------------------------------------------


def cmd_pack(args) -> int:
    config, tensors = load_checkpoint(args.checkpoint)
    target = config.get("schedule.target")
    if target is None:
        raise ConfigError(f"{args.checkpoint}: checkpoint does not record schedule.target")
    pattern = NmPattern.parse(target)
    masks = {k[len("mask/") :]: v for k, v in tensors.items() if k.startswith("mask/")}
    if not masks:
        raise ConfigError(f"{args.checkpoint}: no masks stored (dense run?)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total_packed = total_dense = 0
    for name, mask_values in sorted(masks.items()):
        mask = SparsityMask(mask_values, "binary", 0.0)
        packed = storage.pack(tensors[name], mask, pattern, axis=0, value_bits=args.value_bits)
        path = storage.save(out / f"{name}.nmpk", packed)
        if args.verify and not np.array_equal(storage.unpack(storage.load(path)), np.where(mask.kept, tensors[name], 0.0)):
            raise ValueError(f"{name}: roundtrip mismatch")
        bits = storage.packed_size_bits(packed)
        dense = tensors[name].size * args.value_bits
        total_packed += bits
        total_dense += dense
        print(f"{name:<16} {pattern}  {bits:>10} bits  ({bits / dense:.4f} of dense)")
    print(f"total: {total_packed} packed bits vs {total_dense} dense ({total_packed / total_dense:.4f})")
    return EXIT_OK


def cmd_export_data(args) -> int:
    cfg = load_run_config(args.config, parse_overrides(args.set))
    data = generate_task(cfg.task, cfg.model.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, sources in (("train", data.train), ("val", data.val)):
        with open(out / f"{split}.jsonl", "w") as fh:
            for src in sources:
                fh.write(json.dumps({"source": src.tolist(), "target": reverse_target(src).tolist()}) + "\n")
    print(f"wrote {len(data.train)} train and {len(data.val)} val records to {out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmsparse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one recipe")
    t.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a cartesian sweep from a spec file")
    s.add_argument("spec")
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("cost", help="parameter/FLOP accounting and N:M compression")
    c.add_argument("--preset", choices=("large", "desk"), default="large")
    c.add_argument("--config", help="take model.* from this run config instead of a preset")
    c.add_argument("--pattern", help="N:M pattern for the compression section")
    c.add_argument("--seq-len", type=int, default=cost.DEFAULT_SEQ_LEN)
    c.add_argument("--vocab", type=int)
    c.add_argument("--scope", choices=("block", "model"), default="block")
    c.add_argument("--value-bits", type=int, default=cost.DEFAULT_VALUE_BITS)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_cost)

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)

    k = sub.add_parser("pack", help="pack a checkpoint's masked FF weights into NMPK files")
    k.add_argument("checkpoint")
    k.add_argument("--out", required=True)
    k.add_argument("--value-bits", type=int, choices=(32, 64), default=64)
    k.add_argument("--verify", action="store_true")
    k.set_defaults(func=cmd_pack)

    e = sub.add_parser("export-data", help="write the synthetic task as JSON lines")
    e.add_argument("--config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
