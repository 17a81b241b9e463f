"""Command-line entry point.

Subcommands: gen-synth, train, evaluate, protocol-shuffled,
protocol-temporal, compare-baselines, verify.  Settings resolve in three
layers: subcommand defaults, then an optional key=value config file, then
explicit flags.  Every run writes its fully resolved configuration next
to its outputs, and machine-readable outputs carry no timestamps, so a
rerun with identical flags and seed reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import (
    SynthConfig,
    dataset_stats,
    gen_synthetic,
    load_bags,
    load_manifest,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .numerics import DEFAULT_PINV_ITERS
from .training import (
    TrainConfig,
    evaluate,
    format_metrics_block,
    format_per_app,
    mean_metric_values,
    split_shuffled,
    split_temporal,
    train,
)
from .verify import run_attention_suite, run_entropy_suite, run_gradcheck_suite

MODEL_FLAG_TO_KIND = {
    "detectbert": "detectbert",
    "baseline-random": "random_selection",
    "baseline-addition": "elementwise_addition",
    "baseline-average": "elementwise_average",
}

SYNTH_DEFAULTS = {
    "bags": 100,
    "dim": 32,
    "bag_size_min": 20,
    "bag_size_max": 200,
    "witness_rate": 0.05,
    "signal_shift": 10.0,
    "correlation_strength": 0.2,
    "positive_fraction": 0.4,
    "seed": 0,
}

TRAIN_DEFAULTS = {
    "model": "detectbert",
    "epochs": 20,
    "learning_rate": 1e-4,
    "lookahead_k": 5,
    "lookahead_alpha": 0.5,
    "batch_size": 1,
    "seed": 0,
    "threshold": 0.5,
    "repetition": 0,
    "blocks": 2,
    "heads": 8,
    "landmarks": 64,
    "pinv_iters": DEFAULT_PINV_ITERS,
}


def _parse_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def _coerce(value, template):
    if isinstance(template, bool):
        return value in ("1", "true", "True", "yes")
    return type(template)(value)


def resolve_settings(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    resolved = dict(defaults)
    given = {k: v for k, v in vars(args).items() if k in defaults and v is not None}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, raw in _parse_config_file(config_path).items():
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = _coerce(raw, defaults[key])
    resolved.update(given)
    return resolved


def write_resolved_config(settings: dict, out_dir: Path):
    lines = [f"{k}={settings[k]}" for k in sorted(settings)]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_configs(s: dict, d: int):
    tc = TrainConfig(
        learning_rate=s["learning_rate"],
        epochs=s["epochs"],
        lookahead_k=s["lookahead_k"],
        lookahead_alpha=s["lookahead_alpha"],
        batch_size=s["batch_size"],
        seed=s["seed"],
        threshold=s["threshold"],
    )
    mc = ModelConfig(
        d=d,
        num_blocks=s["blocks"],
        heads=s["heads"],
        landmarks=s["landmarks"],
        pinv_iters=s["pinv_iters"],
    )
    return tc, mc


def _write_history(history, path: Path):
    if not history:
        path.write_text("")
        return
    keys = list(history[0].keys())
    lines = [",".join(keys)]
    for rec in history:
        lines.append(",".join(_fmt_cell(rec.get(k)) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _write_split(plan, manifest, path: Path):
    lines = ["index,app_id,role"]
    for role in ("train", "validation", "test"):
        for idx in getattr(plan, role):
            lines.append(f"{idx},{manifest.records[idx].app_id},{role}")
    path.write_text("\n".join(lines) + "\n")


def _read_split(path: Path) -> dict:
    roles = {"train": [], "validation": [], "test": []}
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        idx, _, role = line.split(",")
        roles[role].append(int(idx))
    return roles


def _manifest_dim(manifest) -> int:
    bag = load_bags(manifest, [0])[0]
    return bag.dim


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    settings = resolve_settings(SYNTH_DEFAULTS, args)
    out = _out_dir(args)
    config = SynthConfig(
        num_bags=settings["bags"],
        d=settings["dim"],
        bag_size_min=settings["bag_size_min"],
        bag_size_max=settings["bag_size_max"],
        witness_rate=settings["witness_rate"],
        signal_shift=settings["signal_shift"],
        correlation_strength=settings["correlation_strength"],
        positive_fraction=settings["positive_fraction"],
        seed=settings["seed"],
    )
    manifest = gen_synthetic(config, out)
    write_resolved_config(settings, out)
    stats = dataset_stats(manifest)
    print(f"wrote {stats['num_apps']} bags to {out}")
    print(f"benign={stats['benign']} malware={stats['malware']} by_year={stats['by_year']}")
    return 0


def cmd_train(args) -> int:
    settings = resolve_settings(TRAIN_DEFAULTS, args)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    plan = split_shuffled(manifest, settings["seed"], settings["repetition"])
    tc, mc = _train_configs(settings, _manifest_dim(manifest))
    kind = MODEL_FLAG_TO_KIND[settings["model"]]
    train_bags = load_bags(manifest, plan.train)
    val_bags = load_bags(manifest, plan.validation)
    result = train(tc, train_bags, val_bags, kind=kind, model_config=mc)
    save_checkpoint(result.params, out / "checkpoint.dbck")
    _write_history(result.history, out / "history.csv")
    _write_split(plan, manifest, out / "split.csv")
    write_resolved_config(settings, out)
    print(f"best epoch {result.best_epoch} (validation F1 {result.best_f1:.2f})")
    print(f"checkpoint written to {out / 'checkpoint.dbck'}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    params = load_checkpoint(args.checkpoint)
    kind = getattr(params, "kind", "detectbert")
    if args.split_file:
        indices = _read_split(Path(args.split_file))[args.subset]
    else:
        indices = range(len(manifest.records))
    bags = load_bags(manifest, indices)
    threshold = args.threshold if args.threshold is not None else 0.5
    metrics, per_app = evaluate(params, bags, kind=kind, threshold=threshold)
    (out / "scores.csv").write_text(format_per_app(per_app))
    (out / "metrics.txt").write_text(format_metrics_block(metrics))
    write_resolved_config(
        {
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "subset": args.subset if args.split_file else "all",
            "threshold": threshold,
        },
        out,
    )
    print(format_metrics_block(metrics), end="")
    return 0


def _run_one_protocol_rep(manifest, plan, settings, kind):
    tc, mc = _train_configs(settings, _manifest_dim(manifest))
    result = train(
        tc,
        load_bags(manifest, plan.train),
        load_bags(manifest, plan.validation),
        kind=kind,
        model_config=mc,
    )
    metrics, per_app = evaluate(
        result.params, load_bags(manifest, plan.test), kind=kind,
        threshold=settings["threshold"],
    )
    return result, metrics, per_app


def cmd_protocol_shuffled(args) -> int:
    settings = resolve_settings({**TRAIN_DEFAULTS, "repetitions": 10}, args)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    kind = MODEL_FLAG_TO_KIND[settings["model"]]
    all_metrics = []
    report = []
    for rep in range(settings["repetitions"]):
        rep_settings = {**settings, "repetition": rep}
        plan = split_shuffled(manifest, settings["seed"], rep)
        _, metrics, per_app = _run_one_protocol_rep(manifest, plan, rep_settings, kind)
        (out / f"rep{rep}_scores.csv").write_text(format_per_app(per_app))
        report.append(f"[repetition {rep}]\n" + format_metrics_block(metrics))
        all_metrics.append(metrics)
    means = mean_metric_values(all_metrics)
    mean_block = "[mean over repetitions]\n" + "".join(
        f"{k}={means[k]:.2f}\n" for k in ("accuracy", "precision", "recall", "f1")
    )
    report.append(mean_block)
    (out / "report.txt").write_text("\n".join(report))
    write_resolved_config(settings, out)
    print(mean_block, end="")
    return 0


def cmd_protocol_temporal(args) -> int:
    settings = resolve_settings(TRAIN_DEFAULTS, args)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    kind = MODEL_FLAG_TO_KIND[settings["model"]]
    plan = split_temporal(manifest)
    _, metrics, per_app = _run_one_protocol_rep(manifest, plan, settings, kind)
    (out / "scores.csv").write_text(format_per_app(per_app))
    proportions = (
        f"train_fraction={plan.train_fraction:.2f}\n"
        f"test_fraction={plan.test_fraction:.2f}\n"
        f"excluded={plan.excluded}\n"
    )
    (out / "report.txt").write_text(proportions + format_metrics_block(metrics))
    _write_split(plan, manifest, out / "split.csv")
    write_resolved_config(settings, out)
    print(proportions + format_metrics_block(metrics), end="")
    return 0


def cmd_compare_baselines(args) -> int:
    settings = resolve_settings(TRAIN_DEFAULTS, args)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    plan = split_shuffled(manifest, settings["seed"], settings["repetition"])
    lines = ["model,accuracy,precision,recall,f1"]
    report = []
    for flag in ("baseline-random", "baseline-addition", "baseline-average", "detectbert"):
        kind = MODEL_FLAG_TO_KIND[flag]
        _, metrics, _ = _run_one_protocol_rep(manifest, plan, settings, kind)
        lines.append(
            f"{flag},{metrics.accuracy:.2f},{metrics.precision:.2f},"
            f"{metrics.recall:.2f},{metrics.f1:.2f}"
        )
        report.append(f"[{flag}]\n" + format_metrics_block(metrics))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    (out / "report.txt").write_text("\n".join(report))
    write_resolved_config(settings, out)
    print("\n".join(lines))
    return 0


def cmd_verify(args) -> int:
    suites = []
    if args.gradcheck or not (args.gradcheck or args.attn or args.entropy):
        suites.append(("gradcheck", lambda: run_gradcheck_suite(args.seed)))
    if args.attn or not (args.gradcheck or args.attn or args.entropy):
        landmarks = tuple(args.m) if args.m else (8, 32, 64, 128)
        suites.append(("attn", lambda: run_attention_suite(args.seed, landmarks=landmarks)))
    if args.entropy or not (args.gradcheck or args.attn or args.entropy):
        suites.append(("entropy", lambda: run_entropy_suite(args.seed)))
    all_passed = True
    for name, runner in suites:
        print(f"[{name}]")
        for result in runner():
            print(result.line())
            all_passed = all_passed and result.passed
    print("verify:", "PASS" if all_passed else "FAIL")
    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detectbert",
        description="Bag-of-embeddings malware scoring: data generation, "
        "training, evaluation, and verification oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value settings file (flags win)")
        p.add_argument("--seed", type=int, default=None)

    gen = sub.add_parser("gen-synth", help="generate a synthetic bag dataset")
    add_common(gen)
    gen.add_argument("--out", required=True)
    gen.add_argument("--bags", type=int, default=None)
    gen.add_argument("--dim", type=int, default=None)
    gen.add_argument("--bag-size-min", dest="bag_size_min", type=int, default=None)
    gen.add_argument("--bag-size-max", dest="bag_size_max", type=int, default=None)
    gen.add_argument("--witness-rate", dest="witness_rate", type=float, default=None)
    gen.add_argument("--signal-shift", dest="signal_shift", type=float, default=None)
    gen.add_argument(
        "--correlation-strength", dest="correlation_strength", type=float, default=None
    )
    gen.add_argument(
        "--positive-fraction", dest="positive_fraction", type=float, default=None
    )
    gen.set_defaults(func=cmd_gen_synth)

    def add_train_flags(p):
        add_common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--model", choices=sorted(MODEL_FLAG_TO_KIND), default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
        p.add_argument("--lookahead-k", dest="lookahead_k", type=int, default=None)
        p.add_argument(
            "--lookahead-alpha", dest="lookahead_alpha", type=float, default=None
        )
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--repetition", type=int, default=None)
        p.add_argument("--blocks", type=int, default=None)
        p.add_argument("--heads", type=int, default=None)
        p.add_argument("--landmarks", type=int, default=None)
        p.add_argument("--pinv-iters", dest="pinv_iters", type=int, default=None)

    tr = sub.add_parser("train", help="train one model on a shuffled split")
    add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score bags with a saved checkpoint")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split-file", dest="split_file", default=None)
    ev.add_argument(
        "--subset", choices=("train", "validation", "test"), default="test"
    )
    ev.add_argument("--threshold", type=float, default=None)
    ev.set_defaults(func=cmd_evaluate)

    ps = sub.add_parser(
        "protocol-shuffled", help="repeated 80/10/10 splits, mean metrics reported"
    )
    add_train_flags(ps)
    ps.add_argument("--repetitions", type=int, default=None)
    ps.set_defaults(func=cmd_protocol_shuffled)

    pt = sub.add_parser(
        "protocol-temporal", help="train on 2019 apps, test on 2020 apps"
    )
    add_train_flags(pt)
    pt.set_defaults(func=cmd_protocol_temporal)

    cb = sub.add_parser(
        "compare-baselines", help="train the three baselines and the full model"
    )
    add_train_flags(cb)
    cb.set_defaults(func=cmd_compare_baselines)

    vf = sub.add_parser("verify", help="run the numerical verification suites")
    vf.add_argument("--gradcheck", action="store_true")
    vf.add_argument("--attn", action="store_true")
    vf.add_argument("--entropy", action="store_true")
    vf.add_argument("--m", type=int, nargs="+", default=None,
                    help="landmark counts for the attention error curve")
    vf.add_argument("--seed", type=int, default=0)
    vf.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
