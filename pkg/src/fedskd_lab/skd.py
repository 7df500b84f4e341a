"""Multi-dimensional similarity knowledge distillation losses.

Feature maps are plain tensors of shape ``(b, c, *spatial)`` with two or
three spatial dims. Layer bookkeeping is done by the caller, who passes
features keyed by tap layer id. Every similarity is the same kernel: the
Gram matrix of a reshaped feature map, each row divided by its L2 norm and
the whole matrix scaled by ``sqrt(n)`` so rows have norm ``sqrt(n)``.

Gradients come from torch autograd, so every function here is
differentiable with respect to the feature maps of both models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import (
    EmptyRegionError,
    MismatchError,
    MissingMasksError,
    NonFiniteError,
    ShapeRankError,
    ZeroRowError,
)

ZERO_ROW_EPS = 1e-12
COMPONENTS = ("B", "P", "R")


@dataclass(frozen=True)
class SimilarityMatrix:
    values: torch.Tensor
    kind: str  # "batch" | "pixel" | "region"
    layer_id: int = 0

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class RegionMaskSet:
    """Region ids per spatial location; 0 marks unassigned pixels.

    ``assignments`` is an integer tensor of the input spatial shape with
    values in ``{0, 1, ..., r}``.
    """

    assignments: torch.Tensor
    r: int

    def __post_init__(self):
        a = torch.as_tensor(self.assignments)
        if a.dtype.is_floating_point:
            raise TypeError("region assignments must be integers")
        object.__setattr__(self, "assignments", a.long())
        if self.r < 1:
            raise ValueError("region count must be >= 1")
        if a.numel() and (int(a.min()) < 0 or int(a.max()) > self.r):
            raise ValueError(f"region ids must lie in 0..{self.r}")

    @property
    def spatial(self) -> tuple[int, ...]:
        return tuple(self.assignments.shape)

    def resample(self, spatial: Sequence[int]) -> "RegionMaskSet":
        """Nearest-neighbour resample to ``spatial``.

        Uses torch's legacy ``nearest`` rule: output index ``o`` reads input
        index ``floor(o * in / out)``.
        """
        spatial = tuple(int(s) for s in spatial)
        if spatial == self.spatial:
            return self
        if len(spatial) != len(self.spatial):
            raise ShapeRankError(f"mask rank {len(self.spatial)} vs target rank {len(spatial)}")
        a = self.assignments[None, None].float()
        out = F.interpolate(a, size=spatial, mode="nearest")[0, 0].long()
        return RegionMaskSet(out, self.r)

    def sizes(self) -> torch.Tensor:
        return torch.bincount(self.assignments.flatten(), minlength=self.r + 1)[1:]


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


def gram_row_normalized(H: torch.Tensor, row_eps: float = 0.0) -> torch.Tensor:
    """Return ``sqrt(n) * rownorm(H @ H.T)`` for an ``n x m`` matrix ``H``.

    With ``row_eps == 0`` a row of the Gram matrix whose norm is below
    ``1e-12`` raises :class:`ZeroRowError`; a positive ``row_eps`` clamps
    the norms from below instead.
    """
    if H.dim() != 2 or H.shape[0] < 1 or H.shape[1] < 1:
        raise ShapeRankError(f"expected a non-empty 2-D matrix, got shape {tuple(H.shape)}")
    _check_finite(H, "feature matrix")
    n = H.shape[0]
    G = H @ H.transpose(0, 1)
    norms = torch.linalg.vector_norm(G, dim=1, keepdim=True)
    if row_eps > 0:
        norms = norms.clamp_min(row_eps)
    elif bool((norms.detach() < ZERO_ROW_EPS).any()):
        bad = torch.nonzero(norms.detach().flatten() < ZERO_ROW_EPS).flatten().tolist()
        raise ZeroRowError(f"zero feature vector(s) at rows {bad}")
    return G / norms * math.sqrt(n)


def batch_similarity(F_: torch.Tensor, layer_id: int = 0, row_eps: float = 0.0) -> SimilarityMatrix:
    b = F_.shape[0]
    return SimilarityMatrix(gram_row_normalized(F_.reshape(b, -1), row_eps), "batch", layer_id)


def resample_spatial(F_: torch.Tensor, target_spatial: Sequence[int]) -> torch.Tensor:
    """Bilinear (2-D) or trilinear (3-D) resampling, ``align_corners=False``.

    Sample positions follow the half-pixel convention: output index ``o``
    maps to input coordinate ``(o + 0.5) * in / out - 0.5`` clamped at 0,
    with no anti-aliasing. A no-op when shapes already agree.
    """
    target = tuple(int(s) for s in target_spatial)
    spatial = tuple(F_.shape[2:])
    if len(target) != len(spatial):
        raise ShapeRankError(f"feature spatial rank {len(spatial)} vs target rank {len(target)}")
    if target == spatial:
        return F_
    mode = {1: "linear", 2: "bilinear", 3: "trilinear"}.get(len(target))
    if mode is None:
        raise ShapeRankError(f"unsupported spatial rank {len(target)}")
    return F.interpolate(F_, size=target, mode=mode, align_corners=False)


def pixel_similarity(
    F_: torch.Tensor,
    target_spatial: Sequence[int] | None = None,
    layer_id: int = 0,
    row_eps: float = 0.0,
) -> SimilarityMatrix:
    if target_spatial is not None:
        F_ = resample_spatial(F_, target_spatial)
    b, c = F_.shape[:2]
    n = math.prod(F_.shape[2:])
    H = F_.reshape(b * c, n).transpose(0, 1)
    return SimilarityMatrix(gram_row_normalized(H, row_eps), "pixel", layer_id)


def region_pool(F_: torch.Tensor, masks: RegionMaskSet) -> torch.Tensor:
    """Average features inside each region; returns an ``r x (b*c)`` matrix."""
    m = masks.resample(F_.shape[2:])
    sizes = m.sizes()
    if bool((sizes == 0).any()):
        empty = (torch.nonzero(sizes == 0).flatten() + 1).tolist()
        raise EmptyRegionError(f"regions {empty} are empty at spatial shape {tuple(F_.shape[2:])}")
    flat = m.assignments.flatten()
    onehot = torch.zeros(masks.r, flat.numel(), dtype=F_.dtype, device=F_.device)
    keep = flat > 0
    onehot[flat[keep] - 1, torch.nonzero(keep).flatten()] = 1.0
    weights = onehot / sizes.to(F_.dtype)[:, None]
    b, c = F_.shape[:2]
    return weights @ F_.reshape(b * c, -1).transpose(0, 1)


def region_similarity(
    F_: torch.Tensor, masks: RegionMaskSet, layer_id: int = 0, row_eps: float = 0.0
) -> SimilarityMatrix:
    return SimilarityMatrix(gram_row_normalized(region_pool(F_, masks), row_eps), "region", layer_id)


def skd_component_loss(
    S_dam: Sequence[SimilarityMatrix],
    S_ktm: Sequence[SimilarityMatrix],
    denominators: Sequence[float] | None = None,
) -> torch.Tensor:
    """Mean over layers of ``||S_dam - S_ktm||_F^2 / n^2``.

    ``denominators`` overrides the per-layer ``n^2`` normalizer.
    """
    if len(S_dam) != len(S_ktm) or not S_dam:
        raise MismatchError(f"layer lists differ or are empty: {len(S_dam)} vs {len(S_ktm)}")
    total = 0.0
    for i, (a, b) in enumerate(zip(S_dam, S_ktm)):
        if a.kind != b.kind:
            raise MismatchError(f"similarity kinds differ at position {i}: {a.kind} vs {b.kind}")
        if a.values.shape != b.values.shape:
            raise MismatchError(
                f"{a.kind} similarity shapes differ at position {i}: "
                f"{tuple(a.values.shape)} vs {tuple(b.values.shape)}"
            )
        denom = a.n**2 if denominators is None else denominators[i]
        total = total + ((a.values - b.values) ** 2).sum() / denom
    return total / len(S_dam)


@dataclass
class SKDLoss:
    """Total multi-dimensional SKD loss plus its per-component breakdown."""

    total: torch.Tensor
    components: dict[str, torch.Tensor]

    def breakdown(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


def skd_total_loss(
    features_dam: Mapping[int, torch.Tensor],
    features_ktm: Mapping[int, torch.Tensor],
    masks: RegionMaskSet | None = None,
    enabled: Iterable[str] = COMPONENTS,
    row_eps: float = 0.0,
    pixel_norm_literal: bool = False,
) -> SKDLoss:
    """Sum of the enabled batch (B), pixel (P) and region (R) losses.

    Both mappings must share the same layer ids. Pixel similarities are
    computed after resampling each KTM feature map to the DAM's spatial
    shape. With ``pixel_norm_literal`` the pixel term divides by
    ``prod(spatial) * spatial[-1]`` (the ``h*w^2`` reading) instead of
    ``prod(spatial)**2``.
    """
    enabled = set(enabled)
    unknown = enabled - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown SKD components {sorted(unknown)}")
    if "R" in enabled and masks is None:
        raise MissingMasksError("region-wise SKD enabled but no region masks were given")
    layers = sorted(features_dam)
    if layers != sorted(features_ktm) or not layers:
        raise MismatchError(f"tap layers differ: {sorted(features_dam)} vs {sorted(features_ktm)}")
    for l in layers:
        if features_dam[l].shape[0] != features_ktm[l].shape[0]:
            raise MismatchError(
                f"batch sizes differ at layer {l}: "
                f"{features_dam[l].shape[0]} vs {features_ktm[l].shape[0]}"
            )

    components: dict[str, torch.Tensor] = {}
    if "B" in enabled:
        components["B"] = skd_component_loss(
            [batch_similarity(features_dam[l], l, row_eps) for l in layers],
            [batch_similarity(features_ktm[l], l, row_eps) for l in layers],
        )
    if "P" in enabled:
        s_dam, s_ktm, denoms = [], [], []
        for l in layers:
            target = features_dam[l].shape[2:]
            s_dam.append(pixel_similarity(features_dam[l], None, l, row_eps))
            s_ktm.append(pixel_similarity(features_ktm[l], target, l, row_eps))
            n = math.prod(target)
            denoms.append(n * target[-1] if pixel_norm_literal else n * n)
        components["P"] = skd_component_loss(s_dam, s_ktm, denoms)
    if "R" in enabled:
        components["R"] = skd_component_loss(
            [region_similarity(features_dam[l], masks, l, row_eps) for l in layers],
            [region_similarity(features_ktm[l], masks, l, row_eps) for l in layers],
        )
    ref = features_dam[layers[0]]
    total = torch.zeros((), dtype=ref.dtype, device=ref.device)
    for v in components.values():
        total = total + v
    return SKDLoss(total, components)
