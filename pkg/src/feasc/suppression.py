"""Response-aware localization, ramp-up scheduling, and feature-map suppression.

Conventions used throughout:

* A feature map is a ``(C, H, W)`` float tensor (channels first, no batch dim);
  batched helpers accept ``(B, C, H, W)``.
* A response map is the channel sum of a feature map, shape ``(H, W)``.
* A suppression mask is a boolean ``(H, W)`` grid where ``True`` marks a
  location whose features are zeroed across all channels.
* The suppression ratio ``eta`` is the *suppressed* fraction of spatial
  locations. Exactly ``round_half_away(eta * H * W)`` locations are marked,
  with ties on equal responses broken by row-major index order, so the mask
  count is reproducible across runs and platforms. The percentile threshold
  is emergent: it equals the smallest marked response.
* Mask construction never participates in autograd; gradients flow only
  through the surviving feature values.

Everything here is a pure function of its inputs (plus an explicit seed for
the random baseline), so all operations are safe to call concurrently.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError

__all__ = [
    "RampSchedule",
    "SuppressionMask",
    "suppressed_count",
    "compute_response_map",
    "ramp_up_eta",
    "build_mask",
    "mask_low_response",
    "mask_random",
    "suppress_features",
    "batch_response_maps",
    "batch_suppress",
    "grid_to_bytes",
    "grid_from_bytes",
    "write_grid",
    "read_grid",
]


def suppressed_count(eta: float, height: int, width: int) -> int:
    """Number of locations to suppress: round(eta*H*W), halves away from zero.

    Python's built-in ``round`` uses banker's rounding; half-away-from-zero is
    used instead so the count is identical across implementations.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"suppression ratio must be in [0, 1], got {eta}")
    return int(math.floor(eta * height * width + 0.5))


def _check_finite(values: Tensor, name: str) -> None:
    finite = torch.isfinite(values)
    if not bool(finite.all()):
        index = tuple(int(i) for i in (~finite).nonzero()[0])
        raise ValidationError(f"{name} contains a non-finite entry at index {index}")


@dataclass(frozen=True)
class RampSchedule:
    """Suppression-ratio warm-in: eta climbs from near zero to ``alpha``.

    ``alpha`` is the final suppressed fraction, ``beta`` the number of epochs
    over which the exponential ramp runs. For epoch ``e < beta``,
    ``eta = alpha * exp(-5 * (1 - e / beta)**2)``; afterwards ``eta = alpha``.
    Both branches agree at ``e = beta``.
    """

    alpha: float = 0.2
    beta: int = 20

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta < 1:
            raise ValidationError(f"beta must be a positive integer, got {self.beta}")

    def eta(self, epoch: int) -> float:
        return ramp_up_eta(epoch, self)


def ramp_up_eta(epoch: int, schedule: RampSchedule) -> float:
    """Suppression ratio for the given epoch under the ramp-up schedule."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if epoch >= schedule.beta:
        return schedule.alpha
    return schedule.alpha * math.exp(-5.0 * (1.0 - epoch / schedule.beta) ** 2)


@dataclass(frozen=True)
class SuppressionMask:
    """Boolean ``(H, W)`` grid; ``True`` marks a location to zero out."""

    values: Tensor
    count_suppressed: int

    def __post_init__(self) -> None:
        if self.values.dtype != torch.bool or self.values.dim() != 2:
            raise ValidationError("mask values must be a 2-D boolean tensor")
        marked = int(self.values.sum())
        if marked != self.count_suppressed:
            raise ValidationError(
                f"count_suppressed={self.count_suppressed} but mask marks {marked}"
            )


def compute_response_map(features: Tensor) -> Tensor:
    """Channel-summed response of a ``(C, H, W)`` feature map -> ``(H, W)``.

    High values mark salient locations. Raises if the input is non-finite,
    naming the offending index.
    """
    if features.dim() != 3:
        raise ValidationError(f"expected (C, H, W) feature map, got shape {tuple(features.shape)}")
    _check_finite(features, "feature map")
    return features.sum(dim=0)


def _topk_mask(response: Tensor, eta: float, largest: bool) -> SuppressionMask:
    if response.dim() != 2:
        raise ValidationError(f"expected (H, W) response map, got shape {tuple(response.shape)}")
    _check_finite(response, "response map")
    height, width = response.shape
    k = suppressed_count(eta, height, width)
    flat = response.reshape(-1)
    # Stable sort keeps row-major order among equal responses.
    order = torch.argsort(flat, descending=largest, stable=True)
    mask = torch.zeros(height * width, dtype=torch.bool)
    mask[order[:k]] = True
    return SuppressionMask(values=mask.reshape(height, width), count_suppressed=k)


def build_mask(response: Tensor, eta: float) -> SuppressionMask:
    """Mark the top-``round(eta*H*W)`` responses for suppression.

    Every marked location's response is >= every unmarked location's; ties are
    broken by row-major index order.
    """
    return _topk_mask(response, eta, largest=True)


def mask_low_response(response: Tensor, eta: float) -> SuppressionMask:
    """Ablation baseline: mark the *bottom*-k responses instead of the top-k."""
    return _topk_mask(response, eta, largest=False)


def mask_random(height: int, width: int, eta: float, seed: int) -> SuppressionMask:
    """Ablation baseline: mark k locations uniformly at random (seeded)."""
    if height < 1 or width < 1:
        raise ValidationError(f"mask shape must be positive, got {height}x{width}")
    k = suppressed_count(eta, height, width)
    generator = torch.Generator().manual_seed(seed)
    order = torch.randperm(height * width, generator=generator)
    mask = torch.zeros(height * width, dtype=torch.bool)
    mask[order[:k]] = True
    return SuppressionMask(values=mask.reshape(height, width), count_suppressed=k)


def suppress_features(features: Tensor, mask: SuppressionMask) -> Tensor:
    """Zero all channels at marked locations: ``out[k,i,j] = (1-mask[i,j]) * F[k,i,j]``.

    The mask broadcasts over the channel dimension and is treated as a
    constant under differentiation, so gradients at marked locations are
    exactly zero and unmarked values pass through bit-exactly.
    """
    if features.dim() != 3:
        raise ValidationError(f"expected (C, H, W) feature map, got shape {tuple(features.shape)}")
    if features.shape[-2:] != mask.values.shape:
        raise ValidationError(
            f"feature map spatial shape {tuple(features.shape[-2:])} does not match "
            f"mask shape {tuple(mask.values.shape)}"
        )
    keep = (~mask.values).to(features.dtype)
    return features * keep


def batch_response_maps(features: Tensor) -> Tensor:
    """Per-sample channel sums for a ``(B, C, H, W)`` batch -> ``(B, H, W)``."""
    if features.dim() != 4:
        raise ValidationError(f"expected (B, C, H, W) batch, got shape {tuple(features.shape)}")
    _check_finite(features, "feature batch")
    return features.sum(dim=1)


def batch_suppress(
    features: Tensor,
    eta: float,
    strategy: str = "feasc",
    seed: int | None = None,
) -> tuple[Tensor, Tensor]:
    """Suppress each sample of a ``(B, C, H, W)`` batch independently.

    ``strategy`` selects the mask source: ``feasc`` (top responses),
    ``low_response`` (bottom responses), or ``random`` (seeded uniform; the
    per-sample seed is ``seed + i``). Returns the suppressed batch and the
    boolean ``(B, H, W)`` mask stack. Masks are built outside autograd.
    """
    if features.dim() != 4:
        raise ValidationError(f"expected (B, C, H, W) batch, got shape {tuple(features.shape)}")
    batch, _, height, width = features.shape
    masks = torch.empty(batch, height, width, dtype=torch.bool)
    with torch.no_grad():
        if strategy == "random":
            if seed is None:
                raise ValidationError("random suppression requires a seed")
            for i in range(batch):
                masks[i] = mask_random(height, width, eta, seed + i).values
        elif strategy in ("feasc", "low_response"):
            responses = batch_response_maps(features.detach())
            for i in range(batch):
                if strategy == "feasc":
                    masks[i] = build_mask(responses[i], eta).values
                else:
                    masks[i] = mask_low_response(responses[i], eta).values
        else:
            raise ValidationError(f"unknown suppression strategy {strategy!r}")
    keep = (~masks).to(features.dtype).unsqueeze(1)
    return features * keep, masks


# Debug grid serialization for the inspect CLI: a 3-int32 little-endian shape
# header (depth, height, width) followed by row-major values. Response maps
# and feature maps are float32 grids; masks are uint8 grids of {0, 1}.

_HEADER = struct.Struct("<iii")


def grid_to_bytes(grid: Tensor) -> bytes:
    """Serialize a 2-D or 3-D grid; 2-D grids are stored with depth 1."""
    if grid.dim() == 2:
        grid = grid.unsqueeze(0)
    if grid.dim() != 3:
        raise ValidationError(f"expected a 2-D or 3-D grid, got shape {tuple(grid.shape)}")
    depth, height, width = grid.shape
    header = _HEADER.pack(depth, height, width)
    if grid.dtype == torch.bool:
        body = grid.to(torch.uint8).contiguous().numpy().tobytes()
    else:
        body = grid.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    return header + body


def grid_from_bytes(raw: bytes) -> Tensor:
    """Inverse of :func:`grid_to_bytes`; dtype inferred from the payload size."""
    depth, height, width = _HEADER.unpack_from(raw)
    count = depth * height * width
    body = raw[_HEADER.size :]
    if len(body) == count:  # uint8 mask grid
        values = np.frombuffer(body, dtype=np.uint8, count=count)
        tensor = torch.from_numpy(values.copy()).to(torch.bool)
    elif len(body) == 4 * count:
        values = np.frombuffer(body, dtype="<f4", count=count)
        tensor = torch.from_numpy(values.copy())
    else:
        raise ValidationError("grid payload size does not match its shape header")
    tensor = tensor.reshape(depth, height, width)
    return tensor.squeeze(0) if depth == 1 else tensor


def write_grid(path, grid: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def read_grid(path) -> Tensor:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
