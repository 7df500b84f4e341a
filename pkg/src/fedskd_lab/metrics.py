"""AUC, Local/Global Test harnesses and the sex-attribute fairness gap."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import MissingAttrError, SingleClassError


def auc(scores, labels) -> float:
    """Mann-Whitney U over ``n_pos * n_neg``; tied pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both positive and negative samples")
    # average ranks give ties exactly half credit
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auc(scores, labels) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``.

    With two columns this equals :func:`auc` on the class-1 column.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    present = np.unique(labels)
    if len(present) < 2:
        raise SingleClassError("multiclass AUC needs at least two classes present")
    if scores.shape[1] == 2:
        return auc(scores[:, 1], labels)
    return float(np.mean([auc(scores[:, k], labels == k) for k in present]))


@torch.no_grad()
def predict_scores(model, inputs: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    """Softmax class probabilities in eval mode; restores the training flag."""
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, inputs.shape[0], batch_size):
        logits, _ = model(inputs[start:start + batch_size])
        out.append(torch.softmax(logits.double(), dim=1))
    model.train(was_training)
    return torch.cat(out).numpy()


def score_auc(scores: np.ndarray, labels) -> float:
    """AUC of a score matrix, NaN (with a warning) when only one class is present."""
    try:
        return multiclass_auc(scores, labels)
    except SingleClassError:
        warnings.warn("single-class test shard; AUC undefined and excluded", RuntimeWarning)
        return float("nan")


@dataclass
class TestSummary:
    per_client: list[float]

    @property
    def mean(self) -> float:
        vals = [v for v in self.per_client if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std(self) -> float:
        vals = [v for v in self.per_client if not np.isnan(v)]
        return float(np.std(vals)) if vals else float("nan")


def local_test(models: Sequence, test_shards: Sequence, scorer: Callable = predict_scores) -> TestSummary:
    """Each client's model on its own test shard."""
    return TestSummary([score_auc(scorer(m, d.inputs), d.labels.numpy()) for m, d in zip(models, test_shards)])


def global_matrix(models: Sequence, test_shards: Sequence, scorer: Callable = predict_scores) -> np.ndarray:
    """``M[i, k]`` = AUC of model ``i`` on client ``k``'s test shard."""
    return np.array([[score_auc(scorer(m, d.inputs), d.labels.numpy()) for d in test_shards] for m in models])


def global_test(models: Sequence, test_shards: Sequence, scorer: Callable = predict_scores) -> TestSummary:
    """Each model scored on every shard; shards weigh equally whatever their size."""
    mat = global_matrix(models, test_shards, scorer)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per = [float(np.nanmean(row)) if not np.isnan(row).all() else float("nan") for row in mat]
    return TestSummary(per)


def fairness_gap_from_aucs(male: Sequence[float], female: Sequence[float]) -> float:
    """``|mean(male) - mean(female)|``; NaN entries (excluded clients) are dropped per group."""
    m = [v for v in male if not np.isnan(v)]
    f = [v for v in female if not np.isnan(v)]
    if not m or not f:
        return float("nan")
    return float(abs(np.mean(m) - np.mean(f)))


def subgroup_aucs(models: Sequence, test_shards: Sequence, scorer: Callable = predict_scores):
    """Per-client AUC on the ``attr == 1`` and ``attr == 0`` parts of the local test shard.

    A client whose subgroup is single-class gets NaN for that subgroup and
    is left out of the corresponding mean.
    """
    male, female = [], []
    for k, (m, d) in enumerate(zip(models, test_shards)):
        if d.sensitive_attr is None:
            raise MissingAttrError(f"client {k} test shard has no sensitive attribute")
        scores = scorer(m, d.inputs)
        labels = d.labels.numpy()
        attr = d.sensitive_attr.numpy()
        for group, out in ((1, male), (0, female)):
            sel = attr == group
            try:
                out.append(multiclass_auc(scores[sel], labels[sel]) if sel.any() else _raise_single())
            except SingleClassError:
                warnings.warn(f"client {k} subgroup attr={group} is single-class; excluded", RuntimeWarning)
                out.append(float("nan"))
    return male, female


def _raise_single():
    raise SingleClassError("empty subgroup")


def fairness_gap(models: Sequence, test_shards: Sequence, scorer: Callable = predict_scores) -> float:
    male, female = subgroup_aucs(models, test_shards, scorer)
    return fairness_gap_from_aucs(male, female)
