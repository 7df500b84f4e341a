"""Synthetic client datasets, non-IID partitioners, splits and region masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyClientError, UnknownSiteError
from .seeding import derive_rng
from .skd import RegionMaskSet


@dataclass
class LabeledDataset:
    inputs: torch.Tensor
    labels: torch.Tensor
    sensitive_attr: torch.Tensor | None = None
    site_labels: torch.Tensor | None = None

    def __post_init__(self):
        self.inputs = torch.as_tensor(self.inputs, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long).flatten()
        n = self.inputs.shape[0]
        if n < 1:
            raise ValueError("a dataset needs at least one sample")
        if self.labels.numel() != n:
            raise ValueError(f"{self.labels.numel()} labels for {n} inputs")
        if int(self.labels.min()) < 0:
            raise ValueError("labels must be non-negative")
        for name in ("sensitive_attr", "site_labels"):
            v = getattr(self, name)
            if v is not None:
                v = torch.as_tensor(v, dtype=torch.long).flatten()
                if v.numel() != n:
                    raise ValueError(f"{name} has {v.numel()} entries for {n} samples")
                setattr(self, name, v)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "LabeledDataset":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]
        return LabeledDataset(self.inputs[idx], self.labels[idx], pick(self.sensitive_attr), pick(self.site_labels))

    def class_counts(self, num_classes: int | None = None) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=num_classes or 0)

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else torch.cat(vals)

        return LabeledDataset(
            torch.cat([p.inputs for p in parts]), torch.cat([p.labels for p in parts]),
            cat("sensitive_attr"), cat("site_labels"),
        )


@dataclass
class PartitionPlan:
    assignment: np.ndarray
    n_clients: int
    method: str

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        counts = np.bincount(self.assignment, minlength=self.n_clients)
        if self.assignment.min() < 0 or len(counts) != self.n_clients:
            raise ValueError("assignment must map every sample to a client in 0..n_clients-1")
        if (counts == 0).any():
            raise EmptyClientError(f"clients {np.flatnonzero(counts == 0).tolist()} received no samples")

    def indices(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clients)

    def apply(self, ds: LabeledDataset) -> list[LabeledDataset]:
        return [ds.subset(self.indices(k)) for k in range(self.n_clients)]


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Round ``proportions * total`` to integers summing exactly to ``total``.

    Leftover units go to the largest fractional parts; ties favour the
    lower client index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    quotas = p * total
    counts = np.floor(quotas).astype(np.int64)
    leftover = total - int(counts.sum())
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:leftover]] += 1
    return counts


def dirichlet_partition(
    ds: LabeledDataset,
    n_clients: int,
    alpha: float,
    seed: int,
    max_redraws: int = 100,
    proportions: Mapping[int, Sequence[float]] | None = None,
    min_size: int = 1,
) -> PartitionPlan:
    """Label-skew partition with per-class client proportions drawn from Dir(alpha).

    Attempt ``a`` uses the stream ``derive_rng(seed, "partition", a)``. For
    each class in ascending order it draws ``p_c = rng.dirichlet(alpha*1)``,
    rounds ``p_c * |class|`` with :func:`largest_remainder`, then deals a
    ``rng.permutation`` of the class's sample indices to clients 0..N-1 in
    consecutive runs. Attempts that leave a client with fewer than
    ``min_size`` samples are redrawn.
    ``proportions`` overrides the draw for the listed classes.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    labels = ds.labels.numpy()
    classes = np.unique(labels)
    attempts = 1 if proportions is not None and set(proportions) >= set(classes.tolist()) else max_redraws
    for attempt in range(attempts):
        rng = derive_rng(seed, "partition", attempt)
        assignment = np.empty(len(labels), dtype=np.int64)
        for c in classes:
            idx = np.flatnonzero(labels == c)
            p = rng.dirichlet(np.full(n_clients, float(alpha)))
            if proportions is not None and int(c) in proportions:
                p = np.asarray(proportions[int(c)], dtype=np.float64)
            counts = largest_remainder(p, len(idx))
            perm = rng.permutation(idx)
            assignment[perm] = np.repeat(np.arange(n_clients), counts)
        if (np.bincount(assignment, minlength=n_clients) >= max(min_size, 1)).all():
            return PartitionPlan(assignment, n_clients, "dirichlet")
    raise EmptyClientError(f"some client kept fewer than {max(min_size, 1)} samples after {attempts} Dirichlet draw(s)")


def stratified_partition(ds: LabeledDataset, grouping: Mapping[int, int]) -> PartitionPlan:
    """Send every sample to the client its site is grouped into."""
    if ds.site_labels is None:
        raise UnknownSiteError("dataset has no site labels")
    sites = ds.site_labels.numpy()
    missing = sorted(set(np.unique(sites).tolist()) - set(grouping))
    if missing:
        raise UnknownSiteError(f"sites {missing} are not in the grouping")
    assignment = np.array([grouping[int(s)] for s in sites], dtype=np.int64)
    return PartitionPlan(assignment, len(set(grouping.values())), "stratified")


def iid_partition(ds: LabeledDataset, n_clients: int, seed: int) -> PartitionPlan:
    perm = derive_rng(seed, "partition", 0).permutation(len(ds))
    assignment = np.empty(len(ds), dtype=np.int64)
    assignment[perm] = np.arange(len(ds)) % n_clients
    return PartitionPlan(assignment, n_clients, "iid")


def _smooth_field(rng: np.random.Generator, channels: int, spatial: Sequence[int]) -> torch.Tensor:
    """Zero-mean, unit-std random field, smooth at a quarter of the resolution."""
    coarse = [max(2, s // 4) for s in spatial]
    z = torch.from_numpy(rng.standard_normal((1, channels, *coarse)))
    mode = "bilinear" if len(spatial) == 2 else "trilinear"
    f = F.interpolate(z, size=tuple(spatial), mode=mode, align_corners=False)[0]
    dims = tuple(range(1, f.dim()))
    f = f - f.mean(dim=dims, keepdim=True)
    return (f / f.std(dim=dims, keepdim=True)).float()


def make_synthetic_task(
    n_clients: int,
    classes: int,
    per_client_shift: float,
    spec: Sequence[int],
    seed: int,
    samples_per_client: int = 60,
    class_counts: Sequence[Sequence[int]] | None = None,
    signal: float = 0.35,
    nuisance: float = 0.5,
    noise: float = 1.0,
) -> list[LabeledDataset]:
    """Class-conditional textured images with a per-client feature shift.

    A sample of class ``y`` with attribute ``a`` is
    ``signal * P_y + nuisance * (2a - 1) * Q + noise * eps`` where ``P_y`` and
    ``Q`` are fixed smooth patterns and ``eps`` is white noise. Client ``i``
    then applies ``x -> g_i * x + o_i + A_i`` with per-channel gain
    ``g_i = 1 + shift * z``, offset ``o_i = shift * z'`` and a smooth site
    artifact ``A_i`` of amplitude ``shift``. ``class_counts[i][k]`` fixes how
    many class-``k`` samples client ``i`` gets; by default classes are
    balanced. Attributes are balanced within each class.
    """
    spec = tuple(int(s) for s in spec)
    c_in, spatial = spec[0], spec[1:]
    patterns = torch.stack([_smooth_field(derive_rng(seed, "data", 0, k), c_in, spatial) for k in range(classes)])
    q = _smooth_field(derive_rng(seed, "data", 1), c_in, spatial)
    if class_counts is None:
        class_counts = [largest_remainder(np.ones(classes), samples_per_client)] * n_clients
    ones = (1,) * len(spatial)

    shards = []
    for i in range(n_clients):
        counts = np.asarray(class_counts[i], dtype=np.int64)
        rng = derive_rng(seed, "data", 2, i)
        gain = 1.0 + per_client_shift * torch.from_numpy(rng.standard_normal(c_in)).float().view(c_in, *ones)
        offset = per_client_shift * torch.from_numpy(rng.standard_normal(c_in)).float().view(c_in, *ones)
        artifact = per_client_shift * _smooth_field(rng, c_in, spatial)

        labels = np.repeat(np.arange(classes), counts)
        attr = np.concatenate([np.arange(k) % 2 for k in counts]) if len(labels) else np.zeros(0, np.int64)
        order = rng.permutation(len(labels))
        labels, attr = labels[order], attr[order]
        eps = torch.from_numpy(rng.standard_normal((len(labels), *spec))).float()
        y = torch.from_numpy(labels)
        a = torch.from_numpy(attr)
        sign = (2 * a - 1).float().view(-1, 1, *ones)
        x = signal * patterns[y] + nuisance * sign * q + noise * eps
        x = gain * x + offset + artifact
        shards.append(LabeledDataset(x, y, a, torch.full((len(labels),), i)))
    return shards


def make_grid_region_masks(spatial: Sequence[int], grid: Sequence[int]) -> RegionMaskSet:
    """Tile the image into ``prod(grid)`` rectangular regions numbered from 1."""
    spatial, grid = tuple(spatial), tuple(grid)
    if len(spatial) != len(grid):
        raise ValueError("grid rank must match spatial rank")
    if any(g < 1 or g > s for g, s in zip(grid, spatial)):
        raise ValueError(f"grid {grid} does not fit spatial shape {spatial}")
    cells = [np.arange(s) * g // s for s, g in zip(spatial, grid)]
    mesh = np.meshgrid(*cells, indexing="ij")
    ids = np.ravel_multi_index(mesh, grid) + 1
    return RegionMaskSet(torch.from_numpy(ids), math.prod(grid))


def save_region_masks(masks: RegionMaskSet, path) -> None:
    """Write masks as text or ``.npz``.

    Text layout: a header ``regions <r> <s1> <s2> [<s3>]``, then the region
    ids in row-major order, one innermost-axis row per line. Lines starting
    with ``#`` are comments. ``.npz`` holds arrays ``assignments`` and ``r``.
    """
    path = Path(path)
    a = masks.assignments.numpy()
    if path.suffix == ".npz":
        np.savez(path, assignments=a, r=np.int64(masks.r))
        return
    rows = a.reshape(-1, a.shape[-1])
    with open(path, "w") as fh:
        fh.write("regions " + " ".join(str(v) for v in (masks.r, *a.shape)) + "\n")
        for row in rows:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_region_masks(path) -> RegionMaskSet:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return RegionMaskSet(torch.from_numpy(z["assignments"].astype(np.int64)), int(z["r"]))
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    header = lines[0]
    if header[0] != "regions" or len(header) < 3:
        raise ValueError(f"{path}: expected header 'regions <r> <s1> ...'")
    r, shape = int(header[1]), tuple(int(v) for v in header[2:])
    values = np.array([int(v) for ln in lines[1:] for v in ln], dtype=np.int64)
    if values.size != math.prod(shape):
        raise ValueError(f"{path}: {values.size} ids for shape {shape}")
    return RegionMaskSet(torch.from_numpy(values.reshape(shape)), r)


def stratified_split(ds: LabeledDataset, test_fraction: float, seed: int, client: int = 0):
    """Per-class shuffled train/test index split.

    Each class contributes ``round(n_c * test_fraction)`` test samples,
    clamped to ``[1, n_c - 1]`` when the class has at least two samples.
    """
    rng = derive_rng(seed, "split", client)
    labels = ds.labels.numpy()
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(len(idx) * test_fraction))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def stratified_folds(ds: LabeledDataset, k: int, seed: int, client: int = 0):
    """``k`` (train, test) index pairs; class members are dealt round-robin to folds."""
    rng = derive_rng(seed, "split", client)
    labels = ds.labels.numpy()
    fold_of = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = np.arange(len(idx)) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


def load_manifest(path) -> LabeledDataset:
    """Load a dataset from a CSV manifest with columns ``path,label,attr,site``.

    ``path`` points at a ``.npy`` array of shape ``(c, *spatial)``, relative
    to the manifest's directory. ``attr`` and ``site`` may be left empty,
    in which case the column is dropped for the whole dataset.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: manifest is empty")
    missing = {"path", "label"} - set(rows[0])
    if missing:
        raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
    inputs = np.stack([np.load(path.parent / r["path"]) for r in rows]).astype(np.float32)
    labels = np.array([int(r["label"]) for r in rows])
    if set(np.unique(labels).tolist()) != set(range(labels.max() + 1)):
        raise ValueError(f"{path}: labels must be contiguous from 0")

    def column(name):
        vals = [r.get(name, "") for r in rows]
        return None if any(v in ("", None) for v in vals) else np.array([int(v) for v in vals])

    return LabeledDataset(torch.from_numpy(inputs), torch.from_numpy(labels), column("attr"), column("site"))
