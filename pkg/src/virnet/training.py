"""Optimisation loop: Adam, step-halving learning rate, adaptive clipping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import objective
from . import tensor as T
from .data import Dataset
from .errors import ContractError, NumericalFailure
from .networks import NetworkConfig, Params, init_params, save_params
from .priors import HyperParams

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "likelihood", "kl_z", "kl_sigma", "total", "grad_norm", "lr")


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    lr_decay: float = 0.5
    lr_floor: float = 3e-6
    lr_decay_every: int | None = None
    batch: int = 16
    iters: int = 1000
    mc_samples: int = 1
    seed: int = 0
    clip: str = "adaptive"
    log_every: int = 0

    def __post_init__(self):
        if not self.lr_floor <= self.lr_init:
            raise ContractError("lr_floor must not exceed lr_init")
        if self.mc_samples < 1 or self.batch < 1 or self.iters < 0:
            raise ContractError("mc_samples and batch must be >= 1, iters >= 0")
        if self.clip not in ("adaptive", "none"):
            raise ContractError(f"unknown clipping mode {self.clip!r}")

    def decay_every(self) -> int:
        """Iterations between halvings: the full schedule is compressed into ``iters``."""
        if self.lr_decay_every:
            return self.lr_decay_every
        halvings = math.ceil(math.log(self.lr_floor / self.lr_init) / math.log(self.lr_decay))
        return max(1, math.ceil(self.iters / (halvings + 1)))

    def lr_at(self, iteration: int) -> float:
        k = iteration // self.decay_every()
        return max(self.lr_init * self.lr_decay**k, self.lr_floor)


class Adam:
    def __init__(self, params: Params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.t = t


def global_grad_norm(params: Params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))


@dataclass
class TrainState:
    """Everything needed to resume bit-exactly."""

    iteration: int = 0
    clip_threshold: float | None = None
    epoch_norms: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    perm: list = field(default_factory=list)
    pos: int = 0
    rng_state: dict | None = None
    adam_t: int = 0


@dataclass
class TrainResult:
    params: Params
    trace: list
    state: TrainState
    optimizer: Adam


def train(dataset: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig, hp: HyperParams,
          params: Params | None = None, state: TrainState | None = None,
          adam_arrays: dict | None = None, snapshot_dir=None) -> TrainResult:
    """Minimise the batch-mean negative ELBO over ``dataset`` (which must be prepared)."""
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if dataset.beta0 is None:
        raise ContractError("call dataset.prepare(hp) before training")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(net_cfg, rng)
    state = state or TrainState()
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt = Adam(params)
    if adam_arrays is not None:
        opt.load_state(adam_arrays, state.adam_t)

    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch)
    trace = []
    while state.iteration < cfg.iters:
        if state.pos >= len(state.perm):
            state.perm = [int(i) for i in rng.permutation(n)]
            state.pos = 0
        idx = state.perm[state.pos:state.pos + cfg.batch]
        state.pos += cfg.batch
        batch = dataset.batch(idx)

        lr = cfg.lr_at(state.iteration)
        opt.zero_grad()
        loss, terms = objective.loss(batch, params, net_cfg, hp, rng, cfg.mc_samples)
        vals = terms.floats()
        if not math.isfinite(loss.item()):
            _abort(params, net_cfg, state, vals, snapshot_dir)
        T.backward(loss)
        norm = global_grad_norm(params)
        if not math.isfinite(norm):
            _abort(params, net_cfg, state, vals, snapshot_dir)
        scale = 1.0
        if cfg.clip == "adaptive" and state.clip_threshold is not None and norm > state.clip_threshold:
            scale = state.clip_threshold / norm
        opt.step(lr, scale)
        state.epoch_norms.append(norm)
        state.iteration += 1
        if state.iteration % per_epoch == 0:
            state.clip_threshold = float(np.mean(state.epoch_norms))
            state.thresholds.append(state.clip_threshold)
            state.epoch_norms = []
        row = {"iteration": state.iteration, **vals, "grad_norm": norm, "lr": lr}
        trace.append(row)
        if cfg.log_every and state.iteration % cfg.log_every == 0:
            log.info("iter %d loss/pixel %.6g lik %.6g klz %.6g kls %.6g lr %.3g", state.iteration,
                     loss.item(), vals["likelihood"], vals["kl_z"], vals["kl_sigma"], lr)

    state.rng_state = rng.bit_generator.state
    state.adam_t = opt.t
    return TrainResult(params=params, trace=trace, state=state, optimizer=opt)


def _abort(params, net_cfg, state, vals, snapshot_dir):
    snapshot = None
    if snapshot_dir is not None:
        snapshot = Path(snapshot_dir) / "nan_snapshot.ckpt"
        snapshot.parent.mkdir(parents=True, exist_ok=True)
        save_params(snapshot, params, net_cfg, meta={"iteration": state.iteration, "terms": vals})
    raise NumericalFailure(f"non-finite loss or gradient at iteration {state.iteration + 1}: {vals}",
                           snapshot=snapshot)


def state_to_meta(state: TrainState) -> dict:
    d = asdict(state)
    return d


def state_from_meta(meta: dict) -> TrainState:
    return TrainState(**meta)


def write_trace(path, rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if not new else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if k != "iteration" else int(r[k]) for k in TRACE_FIELDS})


def read_trace(path) -> list[dict]:
    with Path(path).open() as f:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]
