"""Adam, gradient clipping and the early-stopping training loop."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from .data import SequenceBatch, iter_batches
from .errors import ContractError, NumericError
from .evaluation import validation_metric
from .rng import stream
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls(
            {n: np.zeros_like(a) for n, a in params.items()},
            {n: np.zeros_like(a) for n, a in params.items()},
            lr=lr,
            **kw,
        )


def adam_step(adam, params, grads):
    """In-place bias-corrected Adam update of ``params`` (a ParamStore)."""
    if set(grads) != set(params.names()):
        missing = sorted(set(params.names()) ^ set(grads))
        raise ContractError(f"gradients misaligned with parameters: {missing}")
    adam.t += 1
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1**adam.t
    c2 = 1.0 - b2**adam.t
    for name in params.names():
        g = grads[name]
        m = adam.m[name] = b1 * adam.m[name] + (1.0 - b1) * g
        v = adam.v[name] = b2 * adam.v[name] + (1.0 - b2) * g * g
        params[name] = params[name] - adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    return params, adam


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in sorted(grads))))


def clip_grads(grads, max_norm):
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    clip: float = 5.0
    lr: float = 1e-3
    seed: int = 0
    metric: str = "elbo"
    # reparameterized trajectories averaged per training sequence
    samples: int = 1
    # truncated BPTT length; 0 = full sequences
    bptt: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.samples < 1:
            raise ContractError("batch_size, max_epochs and samples must be positive")
        if self.patience < 0:
            raise ContractError("patience must be non-negative")
        if self.clip <= 0 or self.lr <= 0:
            raise ContractError("clip and lr must be positive")
        if self.metric not in ("elbo", "nll"):
            raise ContractError(f"metric must be 'elbo' or 'nll', got {self.metric!r}")
        if self.bptt < 0 or self.seed < 0:
            raise ContractError("bptt and seed must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_metric: float
    wall_seconds: float


@dataclass
class TrainingState:
    """Everything needed to continue training bit-exactly."""

    params: object
    adam: AdamState
    epoch: int = 0
    best_params: object = None
    best_metric: float = -np.inf
    best_epoch: int = 0
    since_best: int = 0
    history: list = field(default_factory=list)
    stopped: bool = False


def _chunks(batch, bptt):
    t = batch.values.shape[1]
    if not bptt or bptt >= t:
        yield batch
        return
    for s in range(0, t, bptt):
        mask = batch.mask[:, s : s + bptt]
        if mask.sum() == 0:
            break
        yield SequenceBatch(batch.values[:, s : s + bptt], mask)


def _detach(state):
    return M.VrnnState(M.T.Tensor(state.h.value), M.T.Tensor(state.c.value))


def loss_and_grads(model, batch, rng, samples=1, state=None):
    """Training loss (-ELBO or NLL, mean per sequence), gradients, final state."""
    cfg = model.config
    with Tape() as tape:
        nets, tensors = M.bind(model, tape)
        if cfg.is_variational:
            rep = batch if samples == 1 else M._Repeated(batch, samples)
            noise = M.draw_noise(rng, rep, cfg.latent)
            res = M.elbo_terms(nets, rep, noise, state=state)
            loss = -res.value
            final = res._tf.final
        else:
            ll, _, final = M._rnn_pass(nets, batch, state)
            loss = -M.T.mean(ll)
    grads = tape.backward(loss)
    return loss.item(), {n: grads[t] for n, t in tensors.items()}, _detach(final)


def new_state(model, cfg):
    return TrainingState(model.params, AdamState.for_params(model.params, lr=cfg.lr))


def train_epoch(model, train, cfg, state, epoch):
    n = len(train)
    order = stream(cfg.seed, "shuffle", epoch).permutation(n)
    total = 0.0
    for bi, batch in enumerate(iter_batches(train, cfg.batch_size, order)):
        rng = stream(cfg.seed, "noise", epoch, bi)
        rstate = None
        for chunk in _chunks(batch, cfg.bptt):
            try:
                loss, grads, rstate = loss_and_grads(model, chunk, rng, cfg.samples, rstate)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}, batch {bi}") from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            adam_step(state.adam, model.params, clip_grads(grads, cfg.clip))
            total += loss * batch.values.shape[0]
    return total / n


def fit(model, train, valid, cfg, state=None, on_epoch=None, clock=time.perf_counter):
    """Train with early stopping on the validation metric.

    Returns the :class:`TrainingState`; ``state.best_params`` holds the
    parameters of the best validation epoch. Passing a previous ``state``
    resumes after its last completed epoch. ``on_epoch(state)`` is called after
    every epoch (e.g. to write checkpoints).
    """
    if not len(train) or not len(valid):
        raise ContractError("training and validation sets must be non-empty")
    if (cfg.metric == "elbo") != model.config.is_variational:
        raise ContractError(f"metric {cfg.metric!r} does not fit family {model.config.family!r}")
    if state is None:
        state = new_state(model, cfg)
    model.params = state.params
    while not state.stopped and state.epoch < cfg.max_epochs:
        epoch = state.epoch + 1
        t0 = clock()
        train_loss = train_epoch(model, train, cfg, state, epoch)
        metric = validation_metric(model, valid, cfg.seed)
        if not np.isfinite(metric):
            raise NumericError(f"non-finite validation metric at epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, metric, clock() - t0)
        state.history.append(rec)
        state.epoch = epoch
        if metric > state.best_metric:
            state.best_metric = metric
            state.best_epoch = epoch
            state.best_params = model.params.copy()
            state.since_best = 0
        else:
            state.since_best += 1
        if state.since_best >= cfg.patience:
            state.stopped = True
        log.info("epoch %d train_loss %.4f valid %.4f", epoch, train_loss, metric)
        if on_epoch is not None:
            on_epoch(state)
    return state
