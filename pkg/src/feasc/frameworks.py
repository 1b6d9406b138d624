"""Siamese contrast frameworks with a feature-suppressed second loss term.

Two scaffolds share one code path:

* ``simsiam``: one encoder/projector tower; the contrast target is the
  detached projection of the other view (stop-gradient), and the distance is
  negative cosine similarity.
* ``byol``: a separate target tower (encoder + projector) updated as an
  exponential moving average of the online tower and never by gradients; the
  distance is the mean squared euclidean distance between row-normalized
  embeddings (identically ``2 + 2 * negative_cosine``).

On top of the base loss, the online branch runs a second, feature-suppressed
path: the online feature map is masked at its most responsive locations and
re-projected through the *same* heads, and the resulting embedding is pulled
toward the untouched target with weight ``lam``. The total objective is
``d_orig + lam * d_supp``.

The per-step report also tracks the mean squared error between normalized
embeddings for both pairs; a larger suppressed-pair MSE corresponds to a
smaller lower bound on the mutual information between the compared views
(see :func:`mi_lower_bound_terms`).
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import CheckpointError, ValidationError
from .suppression import batch_response_maps, batch_suppress, build_mask

__all__ = [
    "EncoderSpec",
    "HeadSpec",
    "LossReport",
    "ForwardResult",
    "SiameseNet",
    "build_encoder",
    "simsiam_distance",
    "byol_distance",
    "feasc_total_loss",
    "ema_update",
    "mi_lower_bound_terms",
    "MI_BOUND_CONST",
    "save_checkpoint",
    "load_checkpoint",
    "build_model_from_checkpoint",
    "load_backbone",
    "CHECKPOINT_SCHEMA",
]

MODES = ("byol", "simsiam")
STRATEGIES = ("none", "feasc", "random", "low_response", "image_suppress")

#: Gaussian-conditional constant in the MI lower bound: 1/2 log(2*pi) + 1/2.
MI_BOUND_CONST = 0.5 * math.log(2.0 * math.pi) + 0.5

CHECKPOINT_SCHEMA = "feasc.checkpoint.v1"


@dataclass(frozen=True)
class EncoderSpec:
    """Backbone selection. ``small`` is a replicate-padded 4-stage conv net
    sized for desk-scale inputs; ``resnet18``/``resnet50`` come from
    torchvision (randomly initialized) with the classifier head removed."""

    arch: str = "small"
    in_channels: int = 3
    width: int = 32  # base channel count of the small encoder

    def __post_init__(self) -> None:
        if self.arch not in ("small", "resnet18", "resnet50"):
            raise ValidationError(f"unknown encoder architecture {self.arch!r}")


@dataclass(frozen=True)
class HeadSpec:
    projection_dim: int = 64
    projection_hidden: int = 128
    prediction_hidden: int = 32


class SmallConvEncoder(nn.Module):
    """Four conv stages (stride 1, 2, 2, 2) with replicate padding.

    Replicate padding keeps a spatially constant input spatially constant in
    the output, which makes response maps of flat images exactly uniform.
    """

    def __init__(self, in_channels: int = 3, width: int = 32):
        super().__init__()
        channels = [width, 2 * width, 4 * width, 4 * width]
        strides = [1, 2, 2, 2]
        layers: list[nn.Module] = []
        previous = in_channels
        for out, stride in zip(channels, strides):
            layers += [
                nn.Conv2d(previous, out, 3, stride=stride, padding=1, padding_mode="replicate"),
                nn.BatchNorm2d(out),
                nn.ReLU(inplace=True),
            ]
            previous = out
        self.stages = nn.Sequential(*layers)
        self.out_channels = channels[-1]

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(x)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.arch == "small":
        return SmallConvEncoder(spec.in_channels, spec.width)
    from torchvision import models

    resnet = models.resnet18(weights=None) if spec.arch == "resnet18" else models.resnet50(weights=None)
    encoder = nn.Sequential(*list(resnet.children())[:-2])  # keep the spatial map
    encoder.out_channels = 512 if spec.arch == "resnet18" else 2048
    return encoder


class ProjectionHead(nn.Module):
    """Global average pool followed by a 2-layer MLP projection."""

    def __init__(self, in_channels: int, spec: HeadSpec):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_channels, spec.projection_hidden),
            nn.BatchNorm1d(spec.projection_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(spec.projection_hidden, spec.projection_dim),
            nn.BatchNorm1d(spec.projection_dim),
        )

    def forward(self, feature_map: Tensor) -> Tensor:
        pooled = feature_map.mean(dim=(2, 3))
        return self.net(pooled)


class PredictionHead(nn.Module):
    """Bottleneck MLP applied on the online side only."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(spec.projection_dim, spec.prediction_hidden),
            nn.BatchNorm1d(spec.prediction_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(spec.prediction_hidden, spec.projection_dim),
        )

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


def _normalize_rows(values: Tensor, name: str) -> Tensor:
    if values.dim() != 2:
        raise ValidationError(f"{name} must be a (B, D) matrix, got shape {tuple(values.shape)}")
    norms = values.norm(dim=1, keepdim=True)
    zero = (norms.squeeze(1) == 0).nonzero()
    if zero.numel():
        raise ValidationError(f"{name} has a zero-norm embedding at row {int(zero[0])}")
    return values / norms


def _check_same_shape(p: Tensor, z: Tensor) -> None:
    if p.shape != z.shape:
        raise ValidationError(f"embedding shapes differ: {tuple(p.shape)} vs {tuple(z.shape)}")


def simsiam_distance(p: Tensor, z: Tensor) -> Tensor:
    """Batch-mean negative cosine similarity; the caller detaches ``z``."""
    _check_same_shape(p, z)
    p_hat = _normalize_rows(p, "predictions")
    z_hat = _normalize_rows(z, "targets")
    return -(p_hat * z_hat).sum(dim=1).mean()


def byol_distance(p: Tensor, z: Tensor) -> Tensor:
    """Batch-mean squared euclidean distance between row-normalized embeddings."""
    _check_same_shape(p, z)
    p_hat = _normalize_rows(p, "predictions")
    z_hat = _normalize_rows(z, "targets")
    return (p_hat - z_hat).pow(2).sum(dim=1).mean()


def feasc_total_loss(d_orig: float, d_supp: float, lam: float):
    """Two-term objective ``d_orig + lam * d_supp``; works on floats or tensors."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    for name, value in (("d_orig", d_orig), ("d_supp", d_supp)):
        if isinstance(value, Tensor):
            if not bool(torch.isfinite(value).all()):
                raise ValidationError(f"{name} is not finite")
        elif not math.isfinite(value):
            raise ValidationError(f"{name} is not finite")
    return d_orig + lam * d_supp


def ema_update(target, online, tau: float):
    """In-place momentum update: ``target <- tau * target + (1 - tau) * online``.

    Accepts module pairs or matching sequences of tensors. Only parameters are
    touched; the target side must never receive gradients.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    if isinstance(target, nn.Module):
        target_params = list(target.parameters())
        online_params = list(online.parameters())
    else:
        target_params = list(target)
        online_params = list(online)
    if len(target_params) != len(online_params):
        raise ValidationError("target and online parameter counts differ")
    with torch.no_grad():
        for t, o in zip(target_params, online_params):
            if t.shape != o.shape:
                raise ValidationError(
                    f"parameter shapes differ: {tuple(t.shape)} vs {tuple(o.shape)}"
                )
            t.mul_(tau).add_(o, alpha=1.0 - tau)
    return target


def mi_lower_bound_terms(z_a: Tensor, z_b: Tensor) -> tuple[float, float | None]:
    """MSE between normalized embeddings and the matching MI lower-bound term.

    Returns ``(mse, -0.5 * log(mse) - MI_BOUND_CONST)`` where ``mse`` is the
    batch-mean squared euclidean distance between the row-normalized inputs.
    A zero MSE (identical inputs) is degenerate: the bound term is ``None``
    rather than infinite. Only the conditional-entropy side is computed; the
    marginal entropy term is not estimable here and is omitted throughout.
    """
    _check_same_shape(z_a, z_b)
    with torch.no_grad():
        mse = float(byol_distance(z_a, z_b))
    if mse == 0.0:
        return 0.0, None
    return mse, -0.5 * math.log(mse) - MI_BOUND_CONST


@dataclass(frozen=True)
class LossReport:
    """Per-step record of the two loss terms and the MSE diagnostics."""

    d_orig: float
    d_supp: float
    lam: float
    total: float
    mse_orig: float
    mse_supp: float

    @classmethod
    def build(cls, d_orig: float, d_supp: float, lam: float,
              mse_orig: float, mse_supp: float) -> "LossReport":
        return cls(
            d_orig=d_orig,
            d_supp=d_supp,
            lam=lam,
            total=feasc_total_loss(d_orig, d_supp, lam),
            mse_orig=mse_orig,
            mse_supp=mse_supp,
        )


@dataclass
class ForwardResult:
    z: Tensor          # target embedding of the first view (detached)
    z_prime: Tensor    # online embedding of the second view
    z_hat: Tensor | None  # suppressed online embedding (None when skipped)
    loss: Tensor
    report: LossReport


class SiameseNet(nn.Module):
    """Online encoder/projector/predictor plus, in byol mode, an EMA target tower."""

    def __init__(self, encoder_spec: EncoderSpec | None = None,
                 head_spec: HeadSpec | None = None, mode: str = "simsiam"):
        super().__init__()
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.encoder_spec = encoder_spec or EncoderSpec()
        self.head_spec = head_spec or HeadSpec()
        self.encoder = build_encoder(self.encoder_spec)
        self.projector = ProjectionHead(self.encoder.out_channels, self.head_spec)
        self.predictor = PredictionHead(self.head_spec)
        if mode == "byol":
            self.target_encoder = build_encoder(self.encoder_spec)
            self.target_projector = ProjectionHead(self.encoder.out_channels, self.head_spec)
            self._sync_target()
        else:
            self.target_encoder = None
            self.target_projector = None

    @torch.no_grad()
    def _sync_target(self) -> None:
        self.target_encoder.load_state_dict(self.encoder.state_dict())
        self.target_projector.load_state_dict(self.projector.state_dict())
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)
        for p in self.target_projector.parameters():
            p.requires_grad_(False)

    def update_target(self, tau: float) -> None:
        """EMA step for the byol target tower; call after each optimizer step."""
        if self.mode != "byol":
            raise ValidationError("update_target is only defined in byol mode")
        ema_update(self.target_encoder, self.encoder, tau)
        ema_update(self.target_projector, self.projector, tau)

    def distance(self, p: Tensor, z: Tensor) -> Tensor:
        return byol_distance(p, z) if self.mode == "byol" else simsiam_distance(p, z)

    def _online_embedding(self, feature_map: Tensor, through_predictor: bool = True) -> Tensor:
        projected = self.projector(feature_map)
        return self.predictor(projected) if through_predictor else projected

    def forward_views(
        self,
        view_a: Tensor,
        view_b: Tensor,
        eta: float,
        *,
        lam: float = 1.0,
        strategy: str = "feasc",
        mask_seed: int | None = None,
        symmetric_suppression: bool = True,
        suppress_through_predictor: bool = True,
    ) -> ForwardResult:
        """Full two-view step: base contrast plus the feature-suppressed term.

        The base loss is symmetrized over the two views as in the underlying
        frameworks; by default the suppressed term is symmetrized the same
        way, so with ``eta=0, lam=1`` the objective is exactly twice the base
        loss. Set ``symmetric_suppression=False`` for the literal one-sided
        reading (suppression on the second view only).

        The suppressed branch is skipped entirely when it cannot contribute
        (``strategy="none"`` or ``lam=0``), making such runs bit-identical to
        the base framework; its report fields are then zero.
        """
        if strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        if lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {lam}")

        features_a = self.encoder(view_a)
        features_b = self.encoder(view_b)
        projected_a = self.projector(features_a)
        projected_b = self.projector(features_b)
        p_a = self.predictor(projected_a)
        p_b = self.predictor(projected_b)
        if self.mode == "byol":
            with torch.no_grad():
                z_a = self.target_projector(self.target_encoder(view_a))
                z_b = self.target_projector(self.target_encoder(view_b))
        else:  # SimSiam: same weights, stop-gradient
            z_a = projected_a.detach()
            z_b = projected_b.detach()

        d_ba = self.distance(p_b, z_a)
        d_ab = self.distance(p_a, z_b)
        d_orig = 0.5 * (d_ba + d_ab)

        skip_suppressed = strategy == "none" or lam == 0
        if skip_suppressed:
            z_hat = None
            d_supp = d_orig.new_zeros(())
            mse_supp = 0.0
        else:
            sides = [(view_b, features_b, z_a)]
            if symmetric_suppression:
                sides.append((view_a, features_a, z_b))
            suppressed_terms = []
            suppressed_mses = []
            z_hat = None
            for side_index, (view, features, target) in enumerate(sides):
                suppressed = self._suppress_branch(
                    view, features, eta, strategy,
                    None if mask_seed is None else mask_seed + side_index * view.shape[0],
                )
                candidate = self._online_embedding(suppressed, suppress_through_predictor)
                if z_hat is None:
                    z_hat = candidate
                suppressed_terms.append(self.distance(candidate, target))
                suppressed_mses.append(mi_lower_bound_terms(candidate, target)[0])
            d_supp = sum(suppressed_terms) / len(suppressed_terms)
            mse_supp = sum(suppressed_mses) / len(suppressed_mses)

        loss = d_orig + lam * d_supp
        mse_orig = 0.5 * (
            mi_lower_bound_terms(p_b, z_a)[0] + mi_lower_bound_terms(p_a, z_b)[0]
        )
        report = LossReport.build(
            d_orig=float(d_orig.detach()), d_supp=float(d_supp.detach()), lam=float(lam),
            mse_orig=float(mse_orig), mse_supp=float(mse_supp),
        )
        return ForwardResult(z=z_a, z_prime=p_b, z_hat=z_hat, loss=loss, report=report)

    def _suppress_branch(self, view: Tensor, features: Tensor, eta: float,
                         strategy: str, mask_seed: int | None) -> Tensor:
        if strategy == "image_suppress":
            # Locate in feature space, erase in pixel space, re-encode.
            with torch.no_grad():
                responses = batch_response_maps(features.detach())
                masks = torch.stack(
                    [build_mask(responses[i], eta).values for i in range(responses.shape[0])]
                )
                up = F.interpolate(
                    masks.unsqueeze(1).float(), size=view.shape[-2:], mode="nearest"
                )
            return self.encoder(view * (1.0 - up))
        suppressed, _ = batch_suppress(features, eta, strategy=strategy, seed=mask_seed)
        return suppressed


# --- Checkpoint container ---------------------------------------------------

def save_checkpoint(path: Path | str, model: SiameseNet, optimizer=None,
                    epoch: int = 0, config: dict | None = None) -> None:
    """Atomically write a versioned checkpoint; cleans up partial files."""
    path = Path(path)
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "mode": model.mode,
        "encoder_spec": asdict(model.encoder_spec),
        "head_spec": asdict(model.head_spec),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "torch_rng_state": torch.get_rng_state(),
        "config": config or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except Exception as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"failed to read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_SCHEMA} checkpoint")
    return payload


def build_model_from_checkpoint(payload: dict) -> SiameseNet:
    model = SiameseNet(
        encoder_spec=EncoderSpec(**payload["encoder_spec"]),
        head_spec=HeadSpec(**payload["head_spec"]),
        mode=payload["mode"],
    )
    model.load_state_dict(payload["model_state"])
    return model


def load_backbone(path: Path | str) -> tuple[nn.Module, EncoderSpec, dict]:
    """Load only the online encoder from a checkpoint (for evaluation)."""
    payload = load_checkpoint(path)
    spec = EncoderSpec(**payload["encoder_spec"])
    encoder = build_encoder(spec)
    encoder_state = {
        key[len("encoder."):]: value
        for key, value in payload["model_state"].items()
        if key.startswith("encoder.")
    }
    encoder.load_state_dict(encoder_state)
    return encoder, spec, payload
