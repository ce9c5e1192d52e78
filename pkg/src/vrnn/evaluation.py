"""Dataset-level likelihood evaluation.

All noise is drawn per sequence (keyed by the sequence's index in the
dataset), so totals do not depend on how sequences are grouped into batches.
"""

from dataclasses import dataclass

import numpy as np

from . import models as M
from .data import make_batch
from .rng import stream

EVAL_BATCH = 64


@dataclass
class Score:
    total: float  # sum over sequences
    sequences: int
    frames: int

    @property
    def per_sequence(self):
        return self.total / self.sequences if self.sequences else float("nan")

    @property
    def per_frame(self):
        return self.total / self.frames if self.frames else float("nan")


def sequence_noise(seed, tag, indices, lengths, t_max, k, samples=1):
    """Noise [t_max x (B*samples) x k]; row b*samples + s belongs to sequence b."""
    out = np.zeros((t_max, len(indices) * samples, k))
    for b, (i, n) in enumerate(zip(indices, lengths)):
        draw = stream(seed, tag, int(i)).standard_normal((n, samples, k))
        out[:n, b * samples : (b + 1) * samples] = draw
    return out


def _chunks(n, size):
    for start in range(0, n, size):
        yield list(range(start, min(n, start + size)))


def elbo_per_sequence(model, ds, seed, batch_size=EVAL_BATCH):
    nets, _ = M.bind(model)
    out = np.zeros(len(ds))
    for idx in _chunks(len(ds), batch_size):
        batch = make_batch([ds.sequences[i] for i in idx])
        noise = sequence_noise(seed, "elbo", idx, batch.lengths, batch.values.shape[1], model.config.latent)
        out[idx] = M.elbo_terms(nets, batch, noise).per_sequence.value
    return out


def rnn_ll_per_sequence(model, ds, batch_size=EVAL_BATCH):
    nets, _ = M.bind(model)
    out = np.zeros(len(ds))
    for idx in _chunks(len(ds), batch_size):
        batch = make_batch([ds.sequences[i] for i in idx])
        ll, _ = M.rnn_log_likelihood(nets, batch)
        out[idx] = ll.value
    return out


def is_per_sequence(model, ds, K, seed, batch_size=EVAL_BATCH):
    """Importance-sampled log-likelihood of every sequence with K proposals."""
    nets, _ = M.bind(model)
    out = np.zeros(len(ds))
    per = max(1, batch_size // K) if K <= batch_size else 1
    for idx in _chunks(len(ds), per):
        batch = make_batch([ds.sequences[i] for i in idx])
        rep = M._Repeated(batch, K)
        noise = sequence_noise(seed, "is", idx, batch.lengths, batch.values.shape[1], model.config.latent, K)
        logw = M.is_log_weights_from_noise(nets, rep, noise).reshape(len(idx), K)
        out[idx] = M._logmeanexp(logw, axis=1)
    return out


def score(values, ds):
    return Score(float(np.sum(values)), len(ds), ds.frames)


def validation_metric(model, ds, seed):
    """Higher-is-better validation score: mean ELBO (vrnn) or mean exact LL (rnn)."""
    if model.config.is_variational:
        return float(np.mean(elbo_per_sequence(model, ds, seed)))
    return float(np.mean(rnn_ll_per_sequence(model, ds)))
