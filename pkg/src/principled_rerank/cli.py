"""Command line interface: ``principled-rerank {generate|train|evaluate|ablate|gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Output files default to ``$PRINCIPLED_RERANK_OUT`` (or the working directory).
Every command writes a ``manifest.json`` describing how to reproduce its output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .core import ConfigError, ContractError, NumericalError
from .data import DataParseError, SynthConfig, generate, load, save, synth_config_dict
from .metrics import MetricsReport, evaluate
from .model import RerankerConfig, load_checkpoint, save_checkpoint
from .obedience import obedience_report
from .training import TrainConfig, grad_check_sample, gradient_check, grid_csv, grid_search, train

log = logging.getLogger("principled_rerank")

OUT_ENV = "PRINCIPLED_RERANK_OUT"
VARIANTS = {
    "baseline": (0.0, 0.0),
    "p1": (1.0, 0.0),
    "p2": (0.0, 1.0),
    "both": (1.0, 1.0),
}
TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 16,
    "lr": 1e-4,
    "lr_grid": [1e-4, 5e-5, 1e-5],
    "seed": 0,
    "p1": True,
    "p2": True,
    "eval_every": 0,
    "keep_best": False,
    "d_model": 32,
    "n_heads": 2,
    "n_blocks": 1,
    "mlp_hidden": [32],
    "n_max": 64,
    "head_mode": "softmax_list",
    "position_mode": "learned_add",
}


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: list[str],
                   timestamps: bool) -> None:
    doc = {
        "tool": "principled-rerank",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(v), "hash": file_hash(v)} for k, v in inputs.items()},
        "outputs": outputs,
    }
    if timestamps:
        doc["created"] = datetime.now(timezone.utc).isoformat()
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[c if isinstance(c, str) else ("-" if c is None else f"{c:.4f}") for c in r]
                        for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


# -- generate -----------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = SynthConfig(
        n_lists=args.lists, n=args.n, d_item=args.d_item, d_user=args.d_user,
        context_weight=args.context_weight, ranker_noise=args.ranker_noise,
        click_scale=args.click_scale, seed=args.seed,
    )
    data, _ = generate(cfg)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest, "generate", synth_config_dict(cfg), {}, [str(out)], args.timestamps)
    save(data, out)
    print(f"wrote {len(data)} lists (n={cfg.n}, d_item={cfg.d_item}, d_user={cfg.d_user}) "
          f"to {out}; click rate {data.click_rate():.4f}")
    return 0


# -- train --------------------------------------------------------------------------


def resolve_train_options(args) -> dict:
    """Flags override the JSON config file, which overrides built-in defaults."""
    opts = dict(TRAIN_DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            file_opts = json.load(fh)
        unknown = set(file_opts) - set(TRAIN_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {sorted(unknown)}")
        opts.update(file_opts)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def build_configs(opts: dict, data) -> tuple[TrainConfig, RerankerConfig]:
    n_max = max([opts["n_max"], *(s.n for s in data)])
    model_cfg = RerankerConfig(
        d_item=data.d_item, d_user=data.d_user, d_model=opts["d_model"], n_heads=opts["n_heads"],
        n_blocks=opts["n_blocks"], mlp_hidden=list(opts["mlp_hidden"]), n_max=n_max,
        head_mode=opts["head_mode"], position_mode=opts["position_mode"], seed=opts["seed"],
    ).validate()
    train_cfg = TrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"], learning_rate=opts["lr"],
        lr_grid=list(opts["lr_grid"]), seed=opts["seed"],
        principle_weights=(1.0 if opts["p1"] else 0.0, 1.0 if opts["p2"] else 0.0),
        eval_every=opts["eval_every"], keep_best=opts["keep_best"],
    ).validate()
    return train_cfg, model_cfg


def cmd_train(args) -> int:
    opts = resolve_train_options(args)
    data = load(args.data)
    if len(data) == 0:
        raise ContractError(f"{args.data} contains no lists")
    valid = load(args.valid, "valid") if args.valid else None
    if args.grid and valid is None:
        raise UsageError("--grid needs --valid")
    train_cfg, model_cfg = build_configs(opts, data)
    d = out_dir(args)
    outputs = ["checkpoint.json", "trainlog.csv"] + (["grid.csv"] if args.grid else [])
    inputs = {"data": args.data, **({"valid": args.valid} if args.valid else {})}
    config = {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(), "grid": bool(args.grid)}
    write_manifest(d / "manifest.json", "train", config, inputs, outputs, args.timestamps)

    if args.grid:
        train_cfg, runs, model, trainlog = grid_search(train_cfg, model_cfg, data, valid)
        atomic_write(d / "grid.csv", grid_csv(runs))
        for r in runs:
            mark = "*" if r.selected else " "
            print(f"{mark} lr={r.learning_rate:g}  valid NDCG={r.metrics.ndcg}  AUC={r.metrics.auc}")
    else:
        model, trainlog = train(train_cfg, model_cfg, data, valid)
    save_checkpoint(model, d / "checkpoint.json")
    trainlog.checkpoint = "checkpoint.json"
    atomic_write(d / "trainlog.csv", trainlog.to_csv(timing=args.timing))
    last = trainlog.records[-1]
    print(f"trained {train_cfg.epochs} epochs at lr={train_cfg.learning_rate:g} "
          f"weights={train_cfg.principle_weights}; final loss {last.total:.6f}; wrote {d}")
    return 0


# -- evaluate -----------------------------------------------------------------------


METRIC_HEADER = ["AUC", "NDCG", "MAP@5", "MAP@10", "MAP@15", "MAP@20",
                 "Precision@5", "Precision@10", "Precision@15", "Precision@20"]


def metrics_row(report: MetricsReport) -> list:
    return [v for _, v in report.columns()]


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load(args.data, "test")
    d = out_dir(args)
    config = {"trials": args.trials, "strict": args.strict, "eval_seed": args.eval_seed,
              "pooled_auc": args.pooled_auc}
    outputs = ["metrics.json", "metrics.csv", "obedience.json", "obedience.csv"]
    write_manifest(d / "manifest.json", "evaluate", config,
                   {"checkpoint": args.checkpoint, "data": args.data}, outputs, args.timestamps)
    report = evaluate(model, data, pooled_auc_mode=args.pooled_auc)
    ob = obedience_report(model, data, args.trials, args.eval_seed, args.strict)
    atomic_write(d / "metrics.json", _with_manifest(report.to_dict()))
    atomic_write(d / "metrics.csv", report.to_csv())
    atomic_write(d / "obedience.json", _with_manifest(ob.to_dict()))
    atomic_write(d / "obedience.csv", ob.to_csv())
    print(format_table(METRIC_HEADER, [metrics_row(report)]))
    print()
    print(format_table(["P1 obedience", "P2 obedience", "lists"], [[ob.p1_rate, ob.p2_rate, str(ob.n_lists)]]))
    return 0


def _with_manifest(d: dict) -> str:
    return json.dumps({**d, "manifest": "manifest.json"}, indent=2, sort_keys=True) + "\n"


# -- ablate -------------------------------------------------------------------------


def improvement_pct(value, base):
    if value is None or base is None or base == 0:
        return None
    return (value - base) / base * 100.0


def ratio_pct(impr, impr_both):
    if impr is None or impr_both is None or impr_both == 0:
        return None
    return impr / impr_both * 100.0


def ablation_tables(raw: list[dict]) -> tuple[str, str]:
    """Summary rows per variant (means, stds, improvements, ratios) and the obedience table."""
    metric_keys = METRIC_HEADER + ["P1 obedience", "P2 obedience"]
    stats = {}
    for variant in VARIANTS:
        rows = [r for r in raw if r["variant"] == variant]
        stats[variant] = {}
        for key in metric_keys:
            vals = [r[key] for r in rows if r[key] is not None]
            stats[variant][key] = (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["variant", "seeds"]
    for key in metric_keys:
        header += [key, f"{key} std", f"{key} improvement %", f"{key} ratio to both %"]
    w.writerow(header)
    for variant in VARIANTS:
        row = [variant, sum(r["variant"] == variant for r in raw)]
        for key in metric_keys:
            mean, std = stats[variant][key]
            base = stats["baseline"][key][0]
            impr = improvement_pct(mean, base)
            impr_both = improvement_pct(stats["both"][key][0], base)
            row += [_cell(mean), _cell(std), _cell(impr), _cell(ratio_pct(impr, impr_both))]
        w.writerow(row)

    ob = io.StringIO()
    w = csv.writer(ob, lineterminator="\n")
    w.writerow(["P1 obedience baseline", "P1 obedience baseline+P1",
                "P2 obedience baseline", "P2 obedience baseline+P2"])
    w.writerow([_cell(stats["baseline"]["P1 obedience"][0]), _cell(stats["p1"]["P1 obedience"][0]),
                _cell(stats["baseline"]["P2 obedience"][0]), _cell(stats["p2"]["P2 obedience"][0])])
    return buf.getvalue(), ob.getvalue()


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_ablate(args) -> int:
    opts = resolve_train_options(args)
    data = load(args.data)
    test = load(args.test, "test")
    if len(data) == 0 or len(test) == 0:
        raise ContractError("ablation needs nonempty train and test files")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    d = out_dir(args)
    base_cfg, model_cfg = build_configs(opts, data)
    seeds = [base_cfg.seed + i for i in range(args.seeds)]
    config = {"train": base_cfg.to_dict(), "model": model_cfg.to_dict(), "seeds": seeds,
              "variants": {k: list(v) for k, v in VARIANTS.items()},
              "trials": args.trials, "eval_seed": args.eval_seed}
    outputs = ["ablation.csv", "ablation_raw.csv", "obedience_table.csv"]
    write_manifest(d / "manifest.json", "ablate", config, {"data": args.data, "test": args.test},
                   outputs, args.timestamps)

    raw = []
    for seed in seeds:
        for variant, weights in VARIANTS.items():
            cfg = TrainConfig(**{**base_cfg.to_dict(), "seed": seed, "principle_weights": weights})
            model, _ = train(cfg, model_cfg, data)
            report = evaluate(model, test)
            ob = obedience_report(model, test, args.trials, args.eval_seed)
            row = {"seed": seed, "variant": variant}
            row.update(dict(zip(METRIC_HEADER, metrics_row(report))))
            row["P1 obedience"], row["P2 obedience"] = ob.p1_rate, ob.p2_rate
            raw.append(row)
            print(f"seed {seed} {variant:>8}: NDCG={report.ndcg:.4f} AUC={report.auc:.4f} "
                  f"P1={ob.p1_rate:.4f} P2={ob.p2_rate:.4f}", flush=True)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = ["seed", "variant", *METRIC_HEADER, "P1 obedience", "P2 obedience"]
    w.writerow(keys)
    for r in raw:
        w.writerow([r["seed"], r["variant"], *(_cell(r[k]) for k in keys[2:])])
    summary, obedience_table = ablation_tables(raw)
    atomic_write(d / "ablation_raw.csv", buf.getvalue())
    atomic_write(d / "ablation.csv", summary)
    atomic_write(d / "obedience_table.csv", obedience_table)
    print(f"wrote ablation results for {len(seeds)} seed(s) to {d}")
    return 0


# -- gradcheck ----------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg = RerankerConfig(
        d_item=args.d_item, d_user=args.d_user, d_model=args.d_model, n_heads=args.n_heads,
        n_blocks=args.n_blocks, mlp_hidden=_ints(args.mlp_hidden), n_max=max(args.n, args.n_max),
        seed=args.seed,
    ).validate()
    if args.n < 2:
        raise ConfigError("--n must be >= 2")
    sample = grad_check_sample(args.n, args.d_item, args.d_user, args.seed)
    report = gradient_check(cfg, sample, min(args.swap_k, args.n - 2), h=args.h,
                            threshold=args.threshold, corrupt=args.corrupt)
    print(report)
    if args.out_dir:
        d = out_dir(args)
        write_manifest(d / "manifest.json", "gradcheck", {**vars(args), "func": None}, {},
                       ["gradcheck.json"], args.timestamps)
        atomic_write(d / "gradcheck.json", _with_manifest({
            "max_rel_error": report.max_rel_error, "worst_param": report.worst_param,
            "worst_index": report.worst_index, "n_coords": report.n_coords,
            "threshold": report.threshold, "h": report.h, "passed": report.passed,
        }))
    return 0 if report.passed else 1


# -- parser -------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (flags override --config, which overrides defaults)")
    g.add_argument("--config", help="JSON file with training/model options")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    g.add_argument("--lr-grid", type=_floats, help="comma-separated grid (default 1e-4,5e-5,1e-5)")
    g.add_argument("--seed", type=int)
    g.add_argument("--p1", action=argparse.BooleanOptionalAction, default=None,
                   help="convergence-consistency terms (default on)")
    g.add_argument("--p2", action=argparse.BooleanOptionalAction, default=None,
                   help="adversarial-consistency terms (default on)")
    g.add_argument("--eval-every", type=int)
    g.add_argument("--keep-best", action=argparse.BooleanOptionalAction, default=None)
    m = p.add_argument_group("model")
    m.add_argument("--d-model", type=int)
    m.add_argument("--n-heads", type=int)
    m.add_argument("--n-blocks", type=int)
    m.add_argument("--mlp-hidden", type=_ints)
    m.add_argument("--n-max", type=int)
    m.add_argument("--head-mode", choices=["softmax_list", "sigmoid_item"])
    m.add_argument("--position-mode", choices=["learned_add", "off"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="principled-rerank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--timestamps", action="store_true",
                        help="record wall-clock creation time in the manifest (breaks byte-identical reruns)")

    g = sub.add_parser("generate", parents=[common], help="write a synthetic click dataset")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--lists", type=int, default=1000)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--d-item", type=int, default=6)
    g.add_argument("--d-user", type=int, default=8)
    g.add_argument("--context-weight", type=float, default=0.5)
    g.add_argument("--ranker-noise", type=float, default=1.0)
    g.add_argument("--click-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a re-ranker")
    t.add_argument("--data", required=True)
    t.add_argument("--valid")
    t.add_argument("--grid", action="store_true", help="tune the learning rate over the grid")
    t.add_argument("--out-dir")
    t.add_argument("--timing", action="store_true", help="add wall-clock column to trainlog.csv")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="metrics and principle obedience")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out-dir")
    e.add_argument("--trials", type=int, default=1, help="adjacent swaps checked per list")
    e.add_argument("--strict", action="store_true", help="check every adjacent swap")
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--pooled-auc", action="store_true", help="pool items of all lists for AUC")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="baseline / +P1 / +P2 / +both comparison")
    a.add_argument("--data", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--trials", type=int, default=1)
    a.add_argument("--eval-seed", type=int, default=0)
    a.add_argument("--out-dir")
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n", type=int, default=4)
    c.add_argument("--d-item", type=int, default=3)
    c.add_argument("--d-user", type=int, default=2)
    c.add_argument("--d-model", type=int, default=8)
    c.add_argument("--n-heads", type=int, default=2)
    c.add_argument("--n-blocks", type=int, default=1)
    c.add_argument("--mlp-hidden", default="8")
    c.add_argument("--n-max", type=int, default=6)
    c.add_argument("--swap-k", type=int, default=1)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--corrupt", action="store_true", help="test hook: add 1 to one gradient entry")
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, NumericalError, DataParseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
