"""Pre-training loop: augmentation -> siamese forward -> SGD, with metrics.

The loop is fully reproducible given the config seed and a fixed thread
count: model init draws from a freshly seeded torch RNG, per-sample
augmentation seeds come from (seed, epoch, dataset index), epoch shuffles
from (seed, epoch), and nothing else is stochastic. Metrics are appended to
``metrics.csv`` in a fixed column order (see ``METRICS_COLUMNS``), one row
per optimizer step, with the per-step wall-clock in seconds.

Checkpoints are written every ``checkpoint_every`` epochs and at the end;
``epochs=0`` emits only the initial state. A non-finite loss aborts the run
with the offending step's diagnostics.
"""

from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from .augment import AugmentPolicy, derive_sample_seed, sample_view_pair
from .data import DatasetManifest, ImageStore, build_manifest
from .errors import TrainingDiverged, ValidationError
from .frameworks import EncoderSpec, HeadSpec, SiameseNet, save_checkpoint
from .suppression import RampSchedule, ramp_up_eta

__all__ = [
    "TrainConfig",
    "MetricsRow",
    "TrainResult",
    "METRICS_COLUMNS",
    "lr_at",
    "train",
    "read_metrics",
    "resolve_manifest",
]

METRICS_COLUMNS = [
    "epoch", "step", "eta", "lr", "d_orig", "d_supp", "lambda",
    "total", "mse_orig", "mse_supp", "wall_clock",
]


@dataclass
class TrainConfig:
    mode: str = "simsiam"
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.1
    warmup_epochs: int = 6  # paper ratio: 20 warm-up epochs out of 100
    momentum: float = 0.5
    weight_decay: float = 1e-4
    alpha: float = 0.2
    beta: int = 20
    lam: float = 1.0
    tau: float = 0.996
    seed: int = 0
    dataset: str = ""
    arch: str = "small"
    encoder_width: int = 32
    projection_dim: int = 64
    projection_hidden: int = 128
    prediction_hidden: int = 32
    resolution: int = 64
    strategy: str = "feasc"
    symmetric_suppression: bool = True
    suppress_through_predictor: bool = True
    checkpoint_every: int = 10
    augment: AugmentPolicy | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("byol", "simsiam"):
            raise ValidationError(f"mode must be byol or simsiam, got {self.mode!r}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError(
                f"warmup epochs ({self.warmup_epochs}) must be < total epochs ({self.epochs})"
            )
        if self.batch_size < 2:
            raise ValidationError(f"batch size must be >= 2, got {self.batch_size}")
        for name in ("base_lr", "momentum", "weight_decay", "lam"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must be in [0, 1], got {self.tau}")
        RampSchedule(self.alpha, self.beta)  # validates alpha/beta

    def policy(self) -> AugmentPolicy:
        if self.augment is not None:
            return self.augment
        return AugmentPolicy(resolution=self.resolution)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(arch=self.arch, width=self.encoder_width)

    def head_spec(self) -> HeadSpec:
        return HeadSpec(
            projection_dim=self.projection_dim,
            projection_hidden=self.projection_hidden,
            prediction_hidden=self.prediction_hidden,
        )

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["lambda"] = payload.pop("lam")
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "lambda" in payload:
            payload["lam"] = payload.pop("lambda")
        augment = payload.get("augment")
        if isinstance(augment, dict):
            augment = {
                k: tuple(v) if isinstance(v, list) else v for k, v in augment.items()
            }
            payload["augment"] = AugmentPolicy(**augment)
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    step: int
    eta: float
    lr: float
    d_orig: float
    d_supp: float
    lam: float
    total: float
    mse_orig: float
    mse_supp: float
    wall_clock: float

    def as_csv(self) -> list[str]:
        return [
            str(self.epoch), str(self.step), repr(self.eta), repr(self.lr),
            repr(self.d_orig), repr(self.d_supp), repr(self.lam), repr(self.total),
            repr(self.mse_orig), repr(self.mse_supp), repr(self.wall_clock),
        ]


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    rows: list[MetricsRow] = field(default_factory=list)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise ValidationError(f"warmup_steps {warmup_steps} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def resolve_manifest(dataset: str | Path) -> DatasetManifest:
    """Accept a manifest JSON path, a directory containing one, or a raw tree."""
    path = Path(dataset)
    if path.is_file():
        return DatasetManifest.load(path)
    if (path / "manifest.json").is_file():
        return DatasetManifest.load(path / "manifest.json")
    return build_manifest(path)


def _mask_seed(seed: int, epoch: int, step: int) -> int:
    # Separate stream from per-sample augmentation seeds.
    return derive_sample_seed(seed ^ 0x5EEDC0DE, epoch, step)


def train(config: TrainConfig, out_dir: Path | str,
          manifest: DatasetManifest | None = None) -> TrainResult:
    """Run pre-training; returns paths to the final checkpoint and metrics log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        if not config.dataset:
            raise ValidationError("config.dataset is required when no manifest is passed")
        manifest = resolve_manifest(config.dataset)

    torch.manual_seed(config.seed)
    model = SiameseNet(config.encoder_spec(), config.head_spec(), mode=config.mode)
    model.train()
    optimizer = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.base_lr, momentum=config.momentum, weight_decay=config.weight_decay,
    )
    schedule = RampSchedule(config.alpha, config.beta)
    policy = config.policy()
    store = ImageStore(manifest)
    train_entries = manifest.train_entries()
    steps_per_epoch = len(train_entries) // config.batch_size
    if config.epochs > 0 and steps_per_epoch == 0:
        raise ValidationError(
            f"batch size {config.batch_size} exceeds the {len(train_entries)}-image train split"
        )
    total_steps = config.epochs * steps_per_epoch

    metrics_path = out_dir / "metrics.csv"
    checkpoint_path = out_dir / "checkpoint.pt"
    rows: list[MetricsRow] = []
    global_step = 0
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for epoch in range(config.epochs):
            eta = ramp_up_eta(epoch, schedule)
            order = list(range(len(train_entries)))
            random.Random((config.seed, "shuffle", epoch)).shuffle(order)
            for step in range(steps_per_epoch):
                started = time.perf_counter()
                batch_ids = order[step * config.batch_size : (step + 1) * config.batch_size]
                views_a, views_b = [], []
                for index in batch_ids:
                    image = store.get(train_entries[index])
                    view_a, view_b = sample_view_pair(
                        image, policy, derive_sample_seed(config.seed, epoch, index)
                    )
                    views_a.append(view_a)
                    views_b.append(view_b)
                lr = lr_at(global_step, total_steps, config.warmup_epochs * steps_per_epoch,
                           config.base_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                result = model.forward_views(
                    torch.stack(views_a), torch.stack(views_b), eta,
                    lam=config.lam, strategy=config.strategy,
                    mask_seed=_mask_seed(config.seed, epoch, step),
                    symmetric_suppression=config.symmetric_suppression,
                    suppress_through_predictor=config.suppress_through_predictor,
                )
                if not math.isfinite(result.report.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"total={result.report.total}, d_orig={result.report.d_orig}, "
                        f"d_supp={result.report.d_supp}, eta={eta}, lr={lr}"
                    )
                optimizer.zero_grad()
                result.loss.backward()
                optimizer.step()
                if config.mode == "byol":
                    model.update_target(config.tau)
                row = MetricsRow(
                    epoch=epoch, step=global_step, eta=eta, lr=lr,
                    d_orig=result.report.d_orig, d_supp=result.report.d_supp,
                    lam=result.report.lam, total=result.report.total,
                    mse_orig=result.report.mse_orig, mse_supp=result.report.mse_supp,
                    wall_clock=time.perf_counter() - started,
                )
                rows.append(row)
                writer.writerow(row.as_csv())
                fh.flush()
                global_step += 1
            if config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_ep{epoch + 1:04d}.pt", model, optimizer,
                    epoch=epoch + 1, config=config.to_dict(),
                )
    save_checkpoint(checkpoint_path, model, optimizer, epoch=config.epochs,
                    config=config.to_dict())
    return TrainResult(checkpoint_path=checkpoint_path, metrics_path=metrics_path, rows=rows)


def read_metrics(path: Path | str) -> list[MetricsRow]:
    """Parse a metrics CSV back into rows (column order is part of the contract)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ValidationError(f"unexpected metrics columns: {reader.fieldnames}")
        for record in reader:
            rows.append(MetricsRow(
                epoch=int(record["epoch"]), step=int(record["step"]),
                eta=float(record["eta"]), lr=float(record["lr"]),
                d_orig=float(record["d_orig"]), d_supp=float(record["d_supp"]),
                lam=float(record["lambda"]), total=float(record["total"]),
                mse_orig=float(record["mse_orig"]), mse_supp=float(record["mse_supp"]),
                wall_clock=float(record["wall_clock"]),
            ))
    return rows
