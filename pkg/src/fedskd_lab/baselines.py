"""Comparison methods on the same clients, data and model substrate.

Server-based methods (FedAvg, FedProx, FedBN) average state dicts and so
need a homogeneous fleet; a heterogeneous one raises
:class:`SchemaMismatchError`. The peer-to-peer FedCross variants circulate
models without any aggregation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledDataset
from .errors import NonFiniteLossError, SchemaMismatchError
from .models import FedModel, ModelSpec, build_model
from .protocol import BatchStream, RoundReport, generate_schedule, make_optimizer
from .seeding import derive_seed

StateDict = Mapping[str, torch.Tensor]


def fedavg_aggregate(params: Sequence[StateDict], weights: Sequence[float]) -> dict[str, torch.Tensor]:
    """Weighted element-wise mean of state dicts; weights are normalised to sum 1.

    Integer entries (batch-norm step counters) are averaged and rounded.
    """
    if not params:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(params) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per model, with a positive sum")
    w = w / w.sum()
    ref = params[0]
    for k, p in enumerate(params[1:], start=1):
        if p.keys() != ref.keys():
            raise SchemaMismatchError(f"model {k} has different parameter names than model 0")
        for name, t in p.items():
            if t.shape != ref[name].shape:
                raise SchemaMismatchError(
                    f"{name}: shape {tuple(t.shape)} in model {k} vs {tuple(ref[name].shape)} in model 0"
                )
    out = {}
    for name, t0 in ref.items():
        acc = sum(float(wk) * p[name].double() for wk, p in zip(w, params))
        out[name] = acc.round().to(t0.dtype) if not t0.dtype.is_floating_point else acc.to(t0.dtype)
    return out


def batchnorm_keys(model: nn.Module) -> set[str]:
    """State-dict keys owned by batch-norm layers (affine params and running stats)."""
    keys = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, nn.modules.batchnorm._BatchNorm):
            prefix = f"{mod_name}." if mod_name else ""
            keys.update(prefix + k for k in mod.state_dict())
    return keys


def fedbn_aggregate(params: Sequence[StateDict], weights: Sequence[float],
                    local_keys: set[str]) -> list[dict[str, torch.Tensor]]:
    """FedAvg on every entry except ``local_keys``, which stay client-local."""
    shared = fedavg_aggregate([{k: v for k, v in p.items() if k not in local_keys} for p in params], weights)
    return [{**shared, **{k: p[k].clone() for k in p if k in local_keys}} for p in params]


def proximal_term(model: nn.Module, global_params: StateDict) -> torch.Tensor:
    """``||theta - theta_global||^2`` over the model's trainable parameters."""
    total = torch.zeros((), dtype=torch.float64)
    for name, p in model.named_parameters():
        total = total + ((p.double() - global_params[name].detach().double()) ** 2).sum()
    return total


def fedprox_local_loss(model: nn.Module, batch, global_params: StateDict, mu: float) -> torch.Tensor:
    x, y = batch
    logits, _ = model(x)
    ce = F.cross_entropy(logits, y)
    if mu == 0:
        return ce
    return ce + (mu / 2.0) * proximal_term(model, global_params).to(ce.dtype)


@dataclass
class TrainingSetup:
    """Everything a training method needs besides its own hyperparameters."""

    specs: list[ModelSpec]
    train: list[LabeledDataset]
    test: list[LabeledDataset]
    rounds: int
    iters: int
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    workers: int = 1
    # called as audit(trainer_client, shard_owner) on every batch draw
    audit: Callable[[int, int], None] | None = None
    streams: list[BatchStream] = field(init=False)

    def __post_init__(self):
        self.streams = [BatchStream(len(d), self.batch_size, self.seed, i) for i, d in enumerate(self.train)]

    @property
    def n(self) -> int:
        return len(self.train)

    def init_model(self, client: int, spec: ModelSpec | None = None) -> FedModel:
        return build_model(spec or self.specs[client], derive_seed(self.seed, "init", client))

    def batch(self, trainer: int, owner: int):
        if self.audit is not None:
            self.audit(trainer, owner)
        idx = torch.from_numpy(self.streams[owner].next())
        return self.train[owner].inputs[idx], self.train[owner].labels[idx]


@dataclass
class RunResult:
    """Deployed model per client plus per-round training logs."""

    models: list[FedModel]
    history: list[RoundReport]


def _ce_steps(model, optimizer, setup: TrainingSetup, trainer: int, owner: int, iters: int,
              loss_fn=None) -> float:
    model.train()
    losses = []
    for _ in range(iters):
        batch = setup.batch(trainer, owner)
        if loss_fn is None:
            logits, _ = model(batch[0])
            loss = F.cross_entropy(logits, batch[1])
        else:
            loss = loss_fn(model, batch)
        if not torch.isfinite(loss):
            raise NonFiniteLossError("non-finite training loss", {"client": trainer, "owner": owner})
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else 0.0


def _report(t, order, rows, start):
    return RoundReport(t, list(order), False, rows, time.perf_counter() - start)


def run_local(setup: TrainingSetup) -> RunResult:
    """Each client trains its own model on its own shard only."""
    models = [setup.init_model(i) for i in range(setup.n)]
    opts = [make_optimizer(m, setup.lr) for m in models]
    history = []
    for t in range(setup.rounds):
        start = time.perf_counter()
        rows = [{"client": i, "model": i, "mode": "local",
                 "loss": _ce_steps(models[i], opts[i], setup, i, i, setup.iters)} for i in range(setup.n)]
        history.append(_report(t, range(setup.n), rows, start))
    return RunResult(models, history)


def run_centralized(setup: TrainingSetup) -> RunResult:
    """One model on the union of all training shards, deployed to every client."""
    pooled = LabeledDataset.concat(setup.train)
    central = TrainingSetup(setup.specs[:1], [pooled], setup.test[:1], setup.rounds, setup.iters,
                            setup.lr, setup.batch_size, setup.seed, audit=None)
    model = central.init_model(0)
    opt = make_optimizer(model, setup.lr)
    history = []
    for t in range(setup.rounds):
        start = time.perf_counter()
        loss = _ce_steps(model, opt, central, 0, 0, setup.iters)
        history.append(_report(t, [0], [{"client": "all", "model": 0, "mode": "central", "loss": loss}], start))
    return RunResult([model] * setup.n, history)


def run_fedcross(setup: TrainingSetup, replicas: bool = False) -> RunResult:
    """A single homogeneous model visits every client each round.

    The visiting order is the round's permutation and each host trains it
    for ``iters // n`` steps (at least one). With ``replicas`` the fleet
    instead holds ``n`` copies of the client-0 architecture that circulate
    exactly as in :func:`run_fedcross_dagger`.
    """
    if replicas:
        homogeneous = TrainingSetup([setup.specs[0]] * setup.n, setup.train, setup.test, setup.rounds,
                                    setup.iters, setup.lr, setup.batch_size, setup.seed, setup.workers, setup.audit)
        return run_fedcross_dagger(homogeneous)
    model = setup.init_model(0, setup.specs[0])
    opt = make_optimizer(model, setup.lr)
    per_host = max(1, setup.iters // setup.n)
    history = []
    for t in range(setup.rounds):
        start = time.perf_counter()
        order = generate_schedule(setup.n, t, setup.seed).order
        rows = [{"client": int(h), "model": 0, "mode": "visit",
                 "loss": _ce_steps(model, opt, setup, int(h), int(h), per_host)} for h in order]
        history.append(_report(t, order.tolist(), rows, start))
    return RunResult([model] * setup.n, history)


def run_fedcross_dagger(setup: TrainingSetup) -> RunResult:
    """Heterogeneous models circulate; each host trains its visitor with CE.

    Model ``j`` (owned by client ``j``) carries its own Adam state. After the
    last round every model returns to its owner for deployment.
    """
    models = [setup.init_model(j) for j in range(setup.n)]
    opts = [make_optimizer(m, setup.lr) for m in models]
    history = []
    for t in range(setup.rounds):
        start = time.perf_counter()
        order = generate_schedule(setup.n, t, setup.seed).order
        rows = []
        for host in range(setup.n):
            j = int(order[host])
            loss = _ce_steps(models[j], opts[j], setup, host, host, setup.iters)
            rows.append({"client": host, "model": j, "mode": "host", "loss": loss})
        history.append(_report(t, order.tolist(), rows, start))
    return RunResult(models, history)


def _server_rounds(setup: TrainingSetup, mu: float = 0.0, bn_local: bool = False) -> RunResult:
    models = [setup.init_model(i) for i in range(setup.n)]
    weights = [len(d) for d in setup.train]
    local_keys = batchnorm_keys(models[0]) if bn_local else set()
    # every client starts from client 0's initialisation
    start_state = models[0].state_dict()
    states = fedbn_aggregate([start_state] + [m.state_dict() for m in models[1:]], [1.0] + [0.0] * (setup.n - 1),
                             local_keys)
    for m, s in zip(models, states):
        m.load_state_dict(s)
    history = []
    for t in range(setup.rounds):
        start = time.perf_counter()
        global_params = {k: v.detach().clone() for k, v in models[0].named_parameters()}
        loss_fn = (lambda m, b: fedprox_local_loss(m, b, global_params, mu)) if mu else None
        rows = []
        for i, m in enumerate(models):
            opt = make_optimizer(m, setup.lr)
            rows.append({"client": i, "model": i, "mode": "server",
                         "loss": _ce_steps(m, opt, setup, i, i, setup.iters, loss_fn)})
        new_states = fedbn_aggregate([m.state_dict() for m in models], weights, local_keys)
        for m, s in zip(models, new_states):
            m.load_state_dict(s)
        history.append(_report(t, range(setup.n), rows, start))
    return RunResult(models, history)


def run_fedavg(setup: TrainingSetup) -> RunResult:
    return _server_rounds(setup)


def run_fedprox(setup: TrainingSetup, mu: float = 0.01) -> RunResult:
    return _server_rounds(setup, mu=mu)


def run_fedbn(setup: TrainingSetup) -> RunResult:
    return _server_rounds(setup, bn_local=True)
