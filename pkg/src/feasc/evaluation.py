"""Evaluation harness: linear probe, fine-tuning, ablations, sweeps, heatmaps.

The linear protocol trains only a linear classifier on frozen, pooled
backbone features (train-time augmentation: random resized crop + flip;
inference: central crop); the backbone, including BatchNorm statistics, is
bit-identical before and after. Fine-tuning trains everything and asserts
the backbone actually moved.

Ablation strategies map onto the trainer's mask sources: ``feasc`` (high
response), ``random``, ``low_response``, ``image_suppress`` (pixel-space
erasure of the upsampled mask), and ``none`` (base framework, no second
term). Results are emitted as rows with a fixed column order
(``RESULTS_COLUMNS``) so sweeps and ablation tables concatenate cleanly.
"""

from __future__ import annotations

import csv
import random
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torchvision.transforms import functional as TF

from .augment import AugmentPolicy, apply_view, derive_sample_seed, sample_view_pair, sample_view_params
from .data import DatasetManifest, ImageStore, SubsetSpec, stratified_subset
from .errors import ValidationError
from .frameworks import load_backbone
from .suppression import RampSchedule, build_mask, compute_response_map, ramp_up_eta, write_grid
from .trainer import TrainConfig, resolve_manifest, train

__all__ = [
    "EvalConfig",
    "EvalResult",
    "AblationSpec",
    "RESULTS_COLUMNS",
    "linear_probe",
    "finetune",
    "run_ablation",
    "sweep_lambda",
    "export_heatmap",
    "HeatmapResult",
    "write_results",
]

RESULTS_COLUMNS = ["method", "strategy", "fraction", "lambda", "seed", "top1"]

PROTOCOLS = ("linear", "finetune")
ABLATION_STRATEGIES = ("none", "feasc", "random", "low_response", "image_suppress")


@dataclass
class EvalConfig:
    checkpoint: str
    dataset: str = ""
    protocol: str = "linear"
    fraction: float = 1.0
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.epochs < 0 or self.lr < 0:
            raise ValidationError("epochs and lr must be non-negative")


@dataclass
class EvalResult:
    top1: float
    protocol: str
    fraction: float
    seed: int
    n_train: int
    n_test: int


@dataclass(frozen=True)
class AblationSpec:
    strategy: str

    def __post_init__(self) -> None:
        if self.strategy not in ABLATION_STRATEGIES:
            raise ValidationError(
                f"strategy must be one of {ABLATION_STRATEGIES}, got {self.strategy!r}"
            )


def _eval_tensor(image: Image.Image, resolution: int) -> torch.Tensor:
    """Central-crop inference view: resize shorter side, crop the middle."""
    if image.mode != "RGB":
        image = image.convert("RGB")
    width, height = image.size
    short = min(width, height)
    scale = resolution / short
    resized = image.resize((round(width * scale), round(height * scale)), Image.BILINEAR)
    return TF.center_crop(TF.to_tensor(resized), [resolution, resolution])


_PROBE_POLICY_FIELDS = dict(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0)


def _features(encoder: nn.Module, images: torch.Tensor) -> torch.Tensor:
    return encoder(images).mean(dim=(2, 3))


def _predict(encoder: nn.Module, head: nn.Linear, store: ImageStore, entries,
             resolution: int, batch_size: int) -> torch.Tensor:
    encoder.eval()
    head.eval()
    predictions = []
    with torch.no_grad():
        for start in range(0, len(entries), batch_size):
            batch = entries[start : start + batch_size]
            images = torch.stack([_eval_tensor(store.get(e), resolution) for e in batch])
            logits = head(_features(encoder, images))
            predictions.append(logits.argmax(dim=1))
    return torch.cat(predictions) if predictions else torch.empty(0, dtype=torch.long)


def _evaluate(cfg: EvalConfig, manifest: DatasetManifest | None,
              trainable_backbone: bool) -> EvalResult:
    encoder, _, payload = load_backbone(cfg.checkpoint)
    resolution = int(payload.get("config", {}).get("resolution", 64))
    if manifest is None:
        if not cfg.dataset:
            raise ValidationError("cfg.dataset is required when no manifest is passed")
        manifest = resolve_manifest(cfg.dataset)
    subset = stratified_subset(manifest, SubsetSpec(cfg.fraction, seed=cfg.seed))
    store = ImageStore(subset)
    train_entries = subset.train_entries()
    test_entries = subset.test_entries()

    torch.manual_seed(cfg.seed)
    head = nn.Linear(encoder.out_channels, subset.num_classes)

    initial_state = {k: v.clone() for k, v in encoder.state_dict().items()}
    if trainable_backbone:
        encoder.train()
        parameters = list(encoder.parameters()) + list(head.parameters())
    else:
        encoder.eval()
        for p in encoder.parameters():
            p.requires_grad_(False)
        parameters = list(head.parameters())

    optimizer = torch.optim.SGD(parameters, lr=cfg.lr, momentum=0.9)
    criterion = nn.CrossEntropyLoss()
    policy = AugmentPolicy(resolution=resolution, **_PROBE_POLICY_FIELDS)
    total_steps = max(1, cfg.epochs * max(1, len(train_entries) // cfg.batch_size))
    global_step = 0
    for epoch in range(cfg.epochs):
        head.train()
        if trainable_backbone:
            encoder.train()
        order = list(range(len(train_entries)))
        random.Random((cfg.seed, "probe", epoch)).shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start : start + cfg.batch_size]
            if len(batch_ids) < 2:
                continue  # BatchNorm in finetune mode needs more than one sample
            images, labels = [], []
            for index in batch_ids:
                entry = train_entries[index]
                rng = random.Random(derive_sample_seed(cfg.seed, epoch, index))
                params = sample_view_params(policy, rng, store.get(entry).size)
                images.append(apply_view(store.get(entry), params, resolution))
                labels.append(entry.label)
            images = torch.stack(images)
            labels = torch.tensor(labels)
            lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * global_step / total_steps))
            for group in optimizer.param_groups:
                group["lr"] = lr
            if trainable_backbone:
                logits = head(_features(encoder, images))
            else:
                with torch.no_grad():
                    pooled = _features(encoder, images)
                logits = head(pooled)
            loss = criterion(logits, labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_step += 1

    final_state = dict(encoder.state_dict())
    if not trainable_backbone:
        for key, value in final_state.items():
            if not torch.equal(value, initial_state[key]):
                raise RuntimeError(f"linear protocol mutated backbone tensor {key}")
    elif cfg.epochs > 0:
        moved = any(
            v.is_floating_point() and not torch.equal(final_state[k], v)
            for k, v in initial_state.items()
        )
        if not moved:
            raise RuntimeError("finetune protocol left the backbone unchanged")

    predictions = _predict(encoder, head, store, test_entries, resolution, cfg.batch_size)
    labels = torch.tensor([e.label for e in test_entries])
    top1 = float((predictions == labels).float().mean()) if len(test_entries) else 0.0
    return EvalResult(
        top1=top1, protocol=cfg.protocol, fraction=cfg.fraction, seed=cfg.seed,
        n_train=len(train_entries), n_test=len(test_entries),
    )


def linear_probe(cfg: EvalConfig, manifest: DatasetManifest | None = None) -> EvalResult:
    """Train a linear classifier on frozen features; returns held-out top-1."""
    if cfg.protocol != "linear":
        raise ValidationError(f"linear_probe requires protocol='linear', got {cfg.protocol!r}")
    return _evaluate(cfg, manifest, trainable_backbone=False)


def finetune(cfg: EvalConfig, manifest: DatasetManifest | None = None) -> EvalResult:
    """Train the whole network from the pre-trained backbone initialization."""
    if cfg.protocol != "finetune":
        raise ValidationError(f"finetune requires protocol='finetune', got {cfg.protocol!r}")
    return _evaluate(cfg, manifest, trainable_backbone=True)


def run_ablation(
    base: TrainConfig,
    spec: AblationSpec,
    out_dir: Path | str,
    manifest: DatasetManifest | None = None,
    probe_epochs: int = 20,
    probe_lr: float = 0.2,
) -> dict:
    """Pre-train under one suppression strategy, then linear-probe it.

    Returns one results row: {method, strategy, fraction, lambda, seed, top1}.
    """
    out_dir = Path(out_dir)
    config = replace(base, strategy=spec.strategy, lam=0.0 if spec.strategy == "none" else base.lam)
    run = train(config, out_dir / spec.strategy, manifest=manifest)
    result = linear_probe(
        EvalConfig(
            checkpoint=str(run.checkpoint_path), dataset=config.dataset,
            protocol="linear", epochs=probe_epochs, lr=probe_lr, seed=config.seed,
        ),
        manifest=manifest,
    )
    return {
        "method": config.mode, "strategy": spec.strategy, "fraction": 1.0,
        "lambda": config.lam, "seed": config.seed, "top1": result.top1,
    }


def sweep_lambda(
    base: TrainConfig,
    grid: list[float],
    out_dir: Path | str,
    manifest: DatasetManifest | None = None,
    probe_epochs: int = 20,
    probe_lr: float = 0.2,
) -> list[dict]:
    """One pre-train + linear probe per lambda; duplicates are dropped with a warning."""
    if not grid:
        raise ValidationError("lambda grid must not be empty")
    deduped: list[float] = []
    for value in grid:
        if value in deduped:
            warnings.warn(f"duplicate lambda {value} dropped from sweep grid")
        else:
            deduped.append(value)
    out_dir = Path(out_dir)
    rows = []
    for lam in deduped:
        config = replace(base, lam=lam, strategy="none" if lam == 0 else base.strategy)
        run = train(config, out_dir / f"lambda_{lam:g}", manifest=manifest)
        result = linear_probe(
            EvalConfig(
                checkpoint=str(run.checkpoint_path), dataset=config.dataset,
                protocol="linear", epochs=probe_epochs, lr=probe_lr, seed=config.seed,
            ),
            manifest=manifest,
        )
        rows.append({
            "method": config.mode, "strategy": config.strategy, "fraction": 1.0,
            "lambda": lam, "seed": config.seed, "top1": result.top1,
        })
    return rows


def write_results(path: Path | str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULTS_COLUMNS})


@dataclass
class HeatmapResult:
    eta: float
    views: list[torch.Tensor]          # two (3, R, R) view tensors
    responses: list[torch.Tensor]      # two (H, W) response maps
    masks: list[torch.Tensor]          # two (H, W) boolean masks
    paths: list[Path] = field(default_factory=list)


def _normalize_map(values: torch.Tensor) -> torch.Tensor:
    low, high = float(values.min()), float(values.max())
    if high == low:
        return torch.zeros_like(values)
    return (values - low) / (high - low)


def export_heatmap(
    checkpoint: Path | str,
    image: Image.Image | Path | str,
    out_dir: Path | str,
    seed: int = 0,
    eta: float | None = None,
    dump_grids: bool = False,
) -> HeatmapResult:
    """Render the response maps and suppression masks of two sampled views.

    Writes, per view: the view itself, the normalized grayscale response map
    (nearest-upsampled to view resolution), and a red overlay of the masked
    cells; plus raw grid dumps when ``dump_grids`` is set. The suppression
    ratio defaults to the checkpoint's own schedule evaluated at its epoch.
    """
    from .errors import IngestionError

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(image, Image.Image):
        path = Path(image)
        try:
            with Image.open(path) as raw:
                image = raw.convert("RGB")
        except Exception as exc:
            raise IngestionError(f"cannot decode image {path}") from exc

    encoder, _, payload = load_backbone(checkpoint)
    encoder.eval()
    config = payload.get("config", {})
    resolution = int(config.get("resolution", 64))
    if eta is None:
        schedule = RampSchedule(config.get("alpha", 0.2), config.get("beta", 20))
        eta = ramp_up_eta(int(payload.get("epoch", 0)), schedule)

    policy = AugmentPolicy(resolution=resolution)
    views = list(sample_view_pair(image, policy, seed))
    responses, masks, paths = [], [], []
    for tag, view in zip(("a", "b"), views):
        with torch.no_grad():
            feature_map = encoder(view.unsqueeze(0)).squeeze(0)
        response = compute_response_map(feature_map)
        mask = build_mask(response, eta)
        responses.append(response)
        masks.append(mask.values)

        normalized = _normalize_map(response)
        heat = Image.fromarray((normalized.numpy() * 255).astype("uint8"), mode="L")
        heat = heat.resize((resolution, resolution), Image.NEAREST)
        up_mask = torch.from_numpy(
            np.asarray(
                Image.fromarray(mask.values.numpy().astype("uint8") * 255, mode="L")
                .resize((resolution, resolution), Image.NEAREST)
            )
        ).bool()
        overlay = view.clone()
        overlay[0][up_mask] = 1.0  # red tint on suppressed cells
        overlay[1][up_mask] *= 0.2
        overlay[2][up_mask] *= 0.2

        view_path = out_dir / f"view_{tag}.png"
        heat_path = out_dir / f"response_{tag}.png"
        overlay_path = out_dir / f"overlay_{tag}.png"
        TF.to_pil_image(view).save(view_path)
        heat.save(heat_path)
        TF.to_pil_image(overlay).save(overlay_path)
        paths += [view_path, heat_path, overlay_path]
        if dump_grids:
            write_grid(out_dir / f"response_{tag}.bin", response)
            write_grid(out_dir / f"mask_{tag}.bin", mask.values)
            paths += [out_dir / f"response_{tag}.bin", out_dir / f"mask_{tag}.bin"]

    from .plots import heatmap_panel

    panel = out_dir / "inspect.png"
    heatmap_panel(views, responses, masks, panel, eta=eta)
    paths.append(panel)
    return HeatmapResult(eta=eta, views=views, responses=responses, masks=masks, paths=paths)
