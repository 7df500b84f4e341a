"""FedSKD round engine: model circulation and bidirectional SKD training.

Every round a random permutation decides which client's model each client
receives. A client that receives its own index trains its personal model
(DAM) with cross-entropy only. Otherwise it trains its DAM together with a
frozen-head copy of the sender's DAM (the KTM) on its own data, minimising
``CE(DAM) + gamma * L_SKD(DAM, KTM) + CE(KTM)``, and discards the copy at
the end of the round. Only DAMs persist.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import NonFiniteError, NonFiniteLossError
from .models import FedModel, clone_model, set_head_frozen
from .seeding import derive_rng
from .skd import COMPONENTS, RegionMaskSet, skd_total_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferSchedule:
    """``order[i]`` is the (0-based) client whose model client ``i`` receives."""

    order: np.ndarray
    round: int

    @property
    def n(self) -> int:
        return len(self.order)

    def is_self(self, i: int) -> bool:
        return int(self.order[i]) == i


def generate_schedule(n: int, round: int, seed: int) -> TransferSchedule:
    """Uniform random permutation from ``derive_rng(seed, "schedule", round)``."""
    if n < 1:
        raise ValueError("need at least one client")
    order = derive_rng(seed, "schedule", round).permutation(n)
    return TransferSchedule(order.astype(np.int64), round)


class BatchStream:
    """Endless minibatch index stream over one shard.

    Each pass is a fresh permutation; a batch that runs past the end of a
    pass continues into the next one, so every batch has exactly
    ``min(batch_size, len(shard))`` samples.
    """

    def __init__(self, size: int, batch_size: int, seed: int, client: int):
        self.size = size
        self.batch_size = min(batch_size, size)
        self._rng = derive_rng(seed, "batch", client)
        self._perm = self._rng.permutation(size)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            take = self._perm[self._pos:self._pos + need]
            out.append(take)
            need -= len(take)
            self._pos += len(take)
            if self._pos == self.size:
                self._perm = self._rng.permutation(self.size)
                self._pos = 0
        return np.concatenate(out)


@dataclass
class ClientState:
    id: int
    dam: FedModel
    train: LabeledDataset
    test: LabeledDataset
    batches: BatchStream
    lr: float = 1e-4
    optimizer: torch.optim.Optimizer = field(init=False)

    def __post_init__(self):
        self.optimizer = make_optimizer(self.dam, self.lr)

    def next_batch(self):
        idx = torch.from_numpy(self.batches.next())
        return self.train.inputs[idx], self.train.labels[idx]


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)


@dataclass
class SKDSettings:
    gamma: float = 1.0
    enabled: frozenset = frozenset(COMPONENTS)
    masks: RegionMaskSet | None = None
    row_eps: float = 0.0
    pixel_norm_literal: bool = False
    start_fraction: float = 0.0

    def active(self, round: int, total_rounds: int) -> bool:
        return round >= self.start_fraction * total_rounds


@dataclass
class StepLosses:
    ce_dam: float
    ce_ktm: float
    skd: dict[str, float]
    gamma: float
    joint: float

    @property
    def skd_total(self) -> float:
        return sum(self.skd.values())


def _check_finite(value: torch.Tensor, what: str, **diag) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"non-finite {what}", dict(diag, term=what))


def bidirectional_step(
    client: ClientState,
    ktm: FedModel,
    ktm_optimizer: torch.optim.Optimizer,
    batch,
    gamma: float,
    enabled=COMPONENTS,
    masks: RegionMaskSet | None = None,
    row_eps: float = 0.0,
    pixel_norm_literal: bool = False,
) -> StepLosses:
    """One joint Adam step on the DAM and the KTM's feature extractor."""
    if not ktm.head_frozen:
        raise ValueError("the received model's prediction header must be frozen")
    x, y = batch
    dam = client.dam
    dam.train()
    ktm.train()
    logits_d, feats_d = dam(x)
    logits_k, feats_k = ktm(x)
    ce_d = F.cross_entropy(logits_d, y)
    ce_k = F.cross_entropy(logits_k, y)
    joint = ce_d + ce_k
    skd = {k: 0.0 for k in COMPONENTS}
    if gamma != 0 and enabled:
        try:
            out = skd_total_loss(feats_d, feats_k, masks, enabled, row_eps, pixel_norm_literal)
        except NonFiniteError as err:
            raise NonFiniteLossError(f"non-finite SKD input: {err}", {
                "client": client.id, "term": "skd", "ce_dam": ce_d.item(), "ce_ktm": ce_k.item()}) from err
        joint = joint + gamma * out.total
        skd.update(out.breakdown())
    _check_finite(joint, "joint loss", client=client.id, ce_dam=ce_d.item(), ce_ktm=ce_k.item(), skd=skd)

    client.optimizer.zero_grad(set_to_none=True)
    ktm_optimizer.zero_grad(set_to_none=True)
    joint.backward()
    client.optimizer.step()
    ktm_optimizer.step()
    return StepLosses(ce_d.item(), ce_k.item(), skd, float(gamma), joint.item())


def self_consolidation_step(client: ClientState, batch) -> float:
    x, y = batch
    client.dam.train()
    logits, _ = client.dam(x)
    loss = F.cross_entropy(logits, y)
    _check_finite(loss, "self-consolidation loss", client=client.id)
    client.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    client.optimizer.step()
    return loss.item()


@dataclass
class RoundReport:
    round: int
    schedule: list[int]
    skd_active: bool
    clients: list[dict]
    wall_time: float = 0.0

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d


def _mean_losses(steps: list[StepLosses]) -> dict:
    return {
        "ce_dam": float(np.mean([s.ce_dam for s in steps])),
        "ce_ktm": float(np.mean([s.ce_ktm for s in steps])),
        "skd": {k: float(np.mean([s.skd[k] for s in steps])) for k in COMPONENTS},
        "joint": float(np.mean([s.joint for s in steps])),
    }


def _train_client(client: ClientState, ktm: FedModel | None, sender: int, iters: int,
                  settings: SKDSettings, active: bool, round: int, hooks) -> dict:
    if ktm is None:
        losses = [self_consolidation_step(client, client.next_batch()) for _ in range(iters)]
        mean = float(np.mean(losses)) if losses else 0.0
        return {"client": client.id, "sender": sender, "mode": "self", "ce_dam": mean,
                "ce_ktm": 0.0, "skd": {k: 0.0 for k in COMPONENTS}, "joint": mean}

    head_at_receipt = {k: v.clone() for k, v in ktm.head.state_dict().items()}
    ktm_optimizer = make_optimizer(ktm, client.lr)
    gamma = settings.gamma if active else 0.0
    steps = []
    for _ in range(iters):
        try:
            steps.append(bidirectional_step(
                client, ktm, ktm_optimizer, client.next_batch(), gamma, settings.enabled,
                settings.masks, settings.row_eps, settings.pixel_norm_literal,
            ))
        except NonFiniteLossError as err:
            err.diagnostics.update(round=round, sender=sender, step=len(steps))
            raise
    for hook in hooks:
        hook(client=client, ktm=ktm, head_at_receipt=head_at_receipt, steps=steps, round=round)
    return {"client": client.id, "sender": sender, "mode": "skd", **_mean_losses(steps)}


def run_round(
    clients: list[ClientState],
    schedule: TransferSchedule,
    iters: int,
    settings: SKDSettings,
    total_rounds: int,
    workers: int = 1,
    hooks=(),
) -> RoundReport:
    """Circulate copies of every DAM per ``schedule`` and train each client.

    All copies are taken before any client trains, so the outcome does not
    depend on client order and parallel execution matches sequential.
    """
    if schedule.n != len(clients):
        raise ValueError(f"schedule for {schedule.n} clients, got {len(clients)}")
    start = time.perf_counter()
    active = settings.active(schedule.round, total_rounds)
    ktms = []
    for i in range(len(clients)):
        if schedule.is_self(i):
            ktms.append(None)
            continue
        ktm = clone_model(clients[int(schedule.order[i])].dam)
        set_head_frozen(ktm, True)
        ktms.append(ktm)

    def work(i):
        return _train_client(clients[i], ktms[i], int(schedule.order[i]), iters, settings,
                             active, schedule.round, hooks)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(work, range(len(clients))))
    else:
        rows = [work(i) for i in range(len(clients))]
    ktms.clear()
    return RoundReport(schedule.round, schedule.order.tolist(), active, rows,
                       time.perf_counter() - start)


def run_fedskd(clients: list[ClientState], rounds: int, iters: int, settings: SKDSettings,
               seed: int, workers: int = 1, hooks=(), on_round=None) -> list[RoundReport]:
    """Run ``rounds`` rounds of schedule generation plus :func:`run_round`."""
    history = []
    for t in range(rounds):
        schedule = generate_schedule(len(clients), t, seed)
        report = run_round(clients, schedule, iters, settings, rounds, workers, hooks)
        log.debug("round %d done in %.2fs", t, report.wall_time)
        history.append(report)
        if on_round is not None:
            on_round(t, report)
    return history
