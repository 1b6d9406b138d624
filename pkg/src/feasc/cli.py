"""Single entry point: pretrain / linear-eval / finetune / ablate /
sweep-lambda / inspect / gen-data.

Config resolution is uniform across subcommands: dataclass defaults, then the
optional YAML config file, then explicit CLI flags (highest precedence). The
resolved snapshot is written into the run directory together with a run
manifest (command, config hash, timestamps), so every run is reproducible
from its own directory.

Exit codes: 0 success, 1 runtime failure (message printed, diagnostics file
written when possible), 2 usage or config errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import yaml

from .data import generate_synthetic
from .errors import CheckpointError, IngestionError, TrainingDiverged, ValidationError
from .evaluation import (
    AblationSpec,
    EvalConfig,
    export_heatmap,
    finetune,
    linear_probe,
    run_ablation,
    sweep_lambda,
    write_results,
)
from .trainer import TrainConfig, read_metrics, train

OUTPUT_ROOT_ENV = "FEASC_OUTPUT_ROOT"

_RUNTIME_ERRORS = (
    ValidationError, IngestionError, CheckpointError, TrainingDiverged,
    RuntimeError, OSError,
)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        raise FileNotFoundError(f"config file not found: {config_path}")
    loaded = yaml.safe_load(config_path.read_text())
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ValidationError(f"config file {config_path} must contain a mapping")
    return loaded


def _config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _make_run_dir(command: str, payload: dict, out: str | None) -> Path:
    root = Path(out or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = root / f"{command}-{stamp}-{_config_hash(payload)}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = root / f"{command}-{stamp}-{_config_hash(payload)}-{suffix}"
    run_dir.mkdir(parents=True)
    return run_dir


def _write_run_manifest(run_dir: Path, command: str, payload: dict) -> None:
    manifest = {
        "command": command,
        "config": payload,
        "config_hash": _config_hash(payload),
        "output_dir": str(run_dir),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    (run_dir / "config.yaml").write_text(yaml.safe_dump(payload, sort_keys=True))


def _overrides(args: argparse.Namespace, names: list[str]) -> dict:
    return {name: getattr(args, name) for name in names if getattr(args, name) is not None}


_TRAIN_FLAGS = [
    "mode", "epochs", "batch_size", "base_lr", "warmup_epochs", "momentum",
    "weight_decay", "alpha", "beta", "lam", "tau", "seed", "dataset", "arch",
    "encoder_width", "resolution", "strategy", "checkpoint_every",
]


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML file with TrainConfig fields")
    parser.add_argument("--mode", choices=["byol", "simsiam"])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", dest="base_lr", type=float)
    parser.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--alpha", type=float, help="final suppression ratio")
    parser.add_argument("--beta", type=int, help="ramp-up epochs")
    parser.add_argument("--lambda", dest="lam", type=float, help="suppressed-term weight")
    parser.add_argument("--tau", type=float, help="target momentum (byol)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--dataset", help="dataset root or manifest.json")
    parser.add_argument("--arch", choices=["small", "resnet18", "resnet50"])
    parser.add_argument("--encoder-width", dest="encoder_width", type=int)
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--strategy",
                        choices=["none", "feasc", "random", "low_response", "image_suppress"])
    parser.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    parser.add_argument("--out", help=f"output root (default $${OUTPUT_ROOT_ENV} or ./runs)")


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    payload = _load_config_file(args.config)
    payload.update(_overrides(args, _TRAIN_FLAGS))
    return TrainConfig.from_dict(payload)


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--dataset", help="dataset root or manifest.json")
    parser.add_argument("--fraction", type=float)
    parser.add_argument("--fractions", help="comma list for a fraction sweep, e.g. 0.1,0.5,1.0")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")


def _resolve_eval_config(args: argparse.Namespace, protocol: str, fraction: float | None = None) -> EvalConfig:
    fields = _overrides(args, ["dataset", "fraction", "epochs", "lr", "batch_size", "seed"])
    if fraction is not None:
        fields["fraction"] = fraction
    return EvalConfig(checkpoint=args.checkpoint, protocol=protocol, **fields)


def _cmd_pretrain(args: argparse.Namespace) -> int:
    config = _resolve_train_config(args)
    payload = config.to_dict()
    run_dir = _make_run_dir("pretrain", payload, args.out)
    _write_run_manifest(run_dir, "pretrain", payload)
    result = train(config, run_dir)
    from .plots import training_curves

    figures = run_dir / "figures"
    figures.mkdir(exist_ok=True)
    rows = result.rows or read_metrics(result.metrics_path)
    if rows:
        training_curves(rows, figures / "training_curves.png")
    print(f"run directory: {run_dir}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_eval(args: argparse.Namespace, protocol: str) -> int:
    runner = linear_probe if protocol == "linear" else finetune
    fractions = None
    if args.fractions:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    base_payload = vars(args).copy()
    base_payload.pop("func", None)
    run_dir = _make_run_dir(protocol if protocol == "finetune" else "linear-eval",
                            {k: v for k, v in base_payload.items() if v is not None}, args.out)
    _write_run_manifest(run_dir, protocol, {k: v for k, v in base_payload.items() if v is not None})
    rows = []
    for fraction in (fractions or [None]):
        cfg = _resolve_eval_config(args, protocol, fraction)
        result = runner(cfg)
        rows.append({
            "method": protocol, "strategy": "-", "fraction": result.fraction,
            "lambda": "-", "seed": result.seed, "top1": result.top1,
        })
        print(f"fraction={result.fraction:g} top1={result.top1:.4f}")
    write_results(run_dir / "results.csv", rows)
    if fractions and len(rows) > 1:
        from .plots import plt

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["fraction"] for r in rows], [100 * r["top1"] for r in rows], "o-")
        ax.set_xlabel("training fraction")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(run_dir / "fractions.png", dpi=120)
        plt.close(fig)
    print(f"results: {run_dir / 'results.csv'}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _resolve_train_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    payload = config.to_dict()
    payload["strategies"] = strategies
    run_dir = _make_run_dir("ablate", payload, args.out)
    _write_run_manifest(run_dir, "ablate", payload)
    rows = []
    for strategy in strategies:
        row = run_ablation(config, AblationSpec(strategy), run_dir,
                           probe_epochs=args.probe_epochs, probe_lr=args.probe_lr)
        rows.append(row)
        print(f"strategy={strategy} top1={row['top1']:.4f}")
    write_results(run_dir / "results.csv", rows)
    from .plots import ablation_plot

    ablation_plot(rows, run_dir / "ablation.png")
    print(f"results: {run_dir / 'results.csv'}")
    return 0


def _cmd_sweep_lambda(args: argparse.Namespace) -> int:
    config = _resolve_train_config(args)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    payload = config.to_dict()
    payload["grid"] = grid
    run_dir = _make_run_dir("sweep-lambda", payload, args.out)
    _write_run_manifest(run_dir, "sweep-lambda", payload)
    rows = sweep_lambda(config, grid, run_dir,
                        probe_epochs=args.probe_epochs, probe_lr=args.probe_lr)
    write_results(run_dir / "results.csv", rows)
    from .plots import lambda_sweep_plot

    lambda_sweep_plot(rows, run_dir / "sweep.png")
    for row in rows:
        print(f"lambda={row['lambda']:g} top1={row['top1']:.4f}")
    print(f"results: {run_dir / 'results.csv'}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    payload = {"checkpoint": args.checkpoint, "image": args.image, "seed": args.seed}
    run_dir = _make_run_dir("inspect", payload, args.out)
    _write_run_manifest(run_dir, "inspect", payload)
    result = export_heatmap(args.checkpoint, args.image, run_dir, seed=args.seed,
                            eta=args.eta, dump_grids=args.dump_grids)
    print(f"eta={result.eta:g}")
    for path in result.paths:
        print(f"wrote {path}")
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    manifest = generate_synthetic(
        args.out, n_classes=args.classes, n_per_class=args.per_class,
        resolution=args.resolution, seed=args.seed,
    )
    print(f"wrote {len(manifest.entries)} images across {manifest.num_classes} classes")
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feasc",
        description="Feature-suppressed contrast pre-training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training run")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("linear-eval", help="linear probe on frozen features")
    _add_eval_flags(p)
    p.set_defaults(func=lambda a: _cmd_eval(a, "linear"))

    p = sub.add_parser("finetune", help="fine-tune the whole network")
    _add_eval_flags(p)
    p.set_defaults(func=lambda a: _cmd_eval(a, "finetune"))

    p = sub.add_parser("ablate", help="compare suppression strategies")
    _add_train_flags(p)
    p.add_argument("--strategies", default="none,feasc,random,low_response")
    p.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=20)
    p.add_argument("--probe-lr", dest="probe_lr", type=float, default=0.2)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="pre-train + probe across lambda values")
    _add_train_flags(p)
    p.add_argument("--grid", required=True, help="comma list, e.g. 0,0.5,1,2,4")
    p.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=20)
    p.add_argument("--probe-lr", dest="probe_lr", type=float, default=0.2)
    p.set_defaults(func=_cmd_sweep_lambda)

    p = sub.add_parser("inspect", help="render response maps and masks for an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, help="override the checkpoint's schedule")
    p.add_argument("--dump-grids", action="store_true",
                   help="also dump raw response/mask grids (.bin)")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("gen-data", help="generate the synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=250)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
