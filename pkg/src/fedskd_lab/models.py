"""Heterogeneous-width classifiers with feature taps and a detachable head.

Two families share one interface:

* ``resnet10``: stem conv (k7, s2) + max-pool (k3, s2), four stages of one
  basic block each (strides 1, 2, 2, 2, widths w, 2w, 4w, 8w), global
  average pool and a single linear header. Tap ``l`` is the output of
  stage ``l``; each stride-2 op maps a spatial size ``s`` to
  ``ceil(s / 2)``, so tap ``l`` has size ``S / 2**(l + 1)`` when ``S`` is a
  multiple of 32.
* ``tinycnn``: a desk-scale stand-in. A stride-1 stem conv (tap 1) and
  three stride-2 conv stages (taps 2..4) with widths w, w, 2w, 2w. Tap
  ``l`` has size ``S / 2**(l - 1)``.

Convolutions are 2-D or 3-D depending on the input rank. Batch norm belongs
to the feature extractor; the header is only the final ``nn.Linear``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .errors import UnsupportedShapeError, WidthUnderflowError

FAMILIES = ("resnet10", "tinycnn")
CHECKPOINT_FORMAT = "fedskd-lab/model"
CHECKPOINT_VERSION = 1
_MIN_SPATIAL = {"resnet10": 32, "tinycnn": 8}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    base_width: int
    num_classes: int
    input_shape: tuple[int, ...]
    tap_layers: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "tap_layers", tuple(sorted(set(int(t) for t in self.tap_layers))))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.base_width < 4:
            raise WidthUnderflowError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.tap_layers or not set(self.tap_layers) <= {1, 2, 3, 4}:
            raise ValueError(f"tap_layers must be a non-empty subset of 1..4, got {self.tap_layers}")

    @property
    def spatial_rank(self) -> int:
        return len(self.input_shape) - 1

    def heterogeneous_to(self, other: "ModelSpec") -> bool:
        return self.family != other.family or self.base_width != other.base_width


def _ops(rank: int):
    if rank == 2:
        return nn.Conv2d, nn.BatchNorm2d, nn.MaxPool2d, nn.AdaptiveAvgPool2d
    if rank == 3:
        return nn.Conv3d, nn.BatchNorm3d, nn.MaxPool3d, nn.AdaptiveAvgPool3d
    raise UnsupportedShapeError(f"only 2-D or 3-D inputs are supported, got spatial rank {rank}")


class BasicBlock(nn.Module):
    def __init__(self, rank: int, cin: int, cout: int, stride: int):
        super().__init__()
        Conv, BN, _, _ = _ops(rank)
        self.conv1 = Conv(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = BN(cout)
        self.conv2 = Conv(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = BN(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(Conv(cin, cout, 1, stride, bias=False), BN(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def _conv_bn_relu(rank, cin, cout, stride):
    Conv, BN, _, _ = _ops(rank)
    return nn.Sequential(Conv(cin, cout, 3, stride, 1, bias=False), BN(cout), nn.ReLU(inplace=True))


class FedModel(nn.Module):
    """A classifier returning ``(logits, {tap_layer: feature_map})``.

    ``stages`` plus ``stem`` form the feature extractor; ``head`` is the
    prediction header.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        rank = spec.spatial_rank
        Conv, BN, MaxPool, AvgPool = _ops(rank)
        cin, w = spec.input_shape[0], spec.base_width
        if spec.family == "resnet10":
            widths = [w, 2 * w, 4 * w, 8 * w]
            self.stem = nn.Sequential(
                Conv(cin, w, 7, 2, 3, bias=False), BN(w), nn.ReLU(inplace=True), MaxPool(3, 2, 1)
            )
            prev, stages = w, []
            for i, width in enumerate(widths):
                stages.append(BasicBlock(rank, prev, width, 1 if i == 0 else 2))
                prev = width
        else:
            widths = [w, w, 2 * w, 2 * w]
            self.stem = nn.Identity()
            prev, stages = cin, []
            for i, width in enumerate(widths):
                stages.append(_conv_bn_relu(rank, prev, width, 1 if i == 0 else 2))
                prev = width
        self.stages = nn.ModuleList(stages)
        self.pool = AvgPool(1)
        self.head = nn.Linear(prev, spec.num_classes)
        self._head_frozen = False

    @property
    def head_frozen(self) -> bool:
        return self._head_frozen

    def extractor_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("head."):
                yield p

    def forward(self, x):
        feats = {}
        x = self.stem(x)
        for layer_id, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if layer_id in self.spec.tap_layers:
                feats[layer_id] = x
        logits = self.head(torch.flatten(self.pool(x), 1))
        return logits, feats


def tap_spatial(spec: ModelSpec, layer_id: int) -> tuple[int, ...]:
    """Spatial shape of tap ``layer_id`` predicted from the family topology."""
    halvings = layer_id + 1 if spec.family == "resnet10" else layer_id - 1
    out = []
    for s in spec.input_shape[1:]:
        for _ in range(halvings):
            s = math.ceil(s / 2)
        out.append(s)
    return tuple(out)


def build_model(spec: ModelSpec, seed: int) -> FedModel:
    """Deterministically initialise a model; the global torch RNG is left untouched."""
    rank = spec.spatial_rank
    if rank not in (2, 3):
        raise UnsupportedShapeError(f"input_shape {spec.input_shape} must have 2 or 3 spatial dims")
    min_s = _MIN_SPATIAL[spec.family]
    if min(spec.input_shape[1:]) < min_s:
        raise UnsupportedShapeError(
            f"{spec.family} needs every spatial dim >= {min_s}, got {spec.input_shape[1:]}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FedModel(spec)


def heterogeneous_fleet(n_clients: int, base: ModelSpec, step: int) -> list[ModelSpec]:
    """Client ``i`` (0-based) gets width ``base.base_width - step * i``."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    smallest = base.base_width - step * (n_clients - 1)
    if smallest < 4:
        raise WidthUnderflowError(
            f"width step {step} over {n_clients} clients leaves width {smallest} < 4"
        )
    return [
        ModelSpec(base.family, base.base_width - step * i, base.num_classes, base.input_shape, base.tap_layers)
        for i in range(n_clients)
    ]


def clone_model(m: FedModel) -> FedModel:
    return copy.deepcopy(m)


def set_head_frozen(m: FedModel, frozen: bool) -> None:
    for p in m.head.parameters():
        p.requires_grad_(not frozen)
        if frozen:
            p.grad = None
    m._head_frozen = bool(frozen)


def count_parameters(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


def save_checkpoint(m: FedModel, path, extra: dict | None = None) -> None:
    """Write a versioned archive: format tag, spec header and the state dict."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(m.spec).items()},
        "head_frozen": m.head_frozen,
        "state_dict": {k: v.detach().clone() for k, v in m.state_dict().items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[FedModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    spec = ModelSpec(**payload["spec"])
    model = build_model(spec, seed=0)
    model.load_state_dict(payload["state_dict"])
    set_head_frozen(model, payload["head_frozen"])
    return model, payload.get("extra", {})
