"""RNN baselines and variational RNNs.

Three families share one parameter layout:

``rnn``
    ``h_t = LSTM(phi_x(x_t), h_{t-1})`` with output density ``phi_dec(h_{t-1})``.
``vrnn``
    Per-step VAE conditioned on ``h_{t-1}``: conditional prior
    ``phi_prior(h_{t-1})``, posterior ``phi_enc(phi_x(x_t), h_{t-1})``, decoder
    ``phi_dec(phi_z(z_t), h_{t-1})``, recurrence
    ``h_t = LSTM([phi_x(x_t), phi_z(z_t)], h_{t-1})``.
``vrnn-i``
    As ``vrnn`` but the prior is a fixed N(0, I) at every step.

Teacher-forced passes only run the encoder, ``phi_z`` and the LSTM step by
step; prior, decoder and density evaluations are batched over all timesteps
once the hidden states are known.
"""

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .distributions import (
    BernoulliParam,
    DiagGaussian,
    MixtureDiagGaussian,
    bernoulli_log_density,
    gauss_kl_terms,
    gauss_log_density,
    gmm_log_density,
    gmm_mode_component,
    gmm_sample,
    SIGMA_FLOOR,
    positive,
    reparam_sample,
)
from .errors import ContractError, DimensionError
from .nn import LstmCell, Mlp, ParamStore, init_params, lstm_step, mlp_forward
from .rng import stream

FAMILIES = ("rnn", "vrnn", "vrnn-i")
HEADS = ("gauss", "gmm", "gmm+bernoulli")


@dataclass
class ModelConfig:
    family: str = "vrnn"
    head: str = "gauss"
    frame_dim: int = 200
    hidden: int = 2000
    latent: int = 200
    mixtures: int = 20
    # feature sizes of phi_x / phi_z; 0 means hidden // 2
    x_out: int = 0
    z_out: int = 0
    x_depth: int = 4
    x_width: int = 600
    z_depth: int = 4
    z_width: int = 600
    enc_depth: int = 4
    enc_width: int = 600
    dec_depth: int = 4
    dec_width: int = 600
    prior_depth: int = 4
    prior_width: int = 600
    # "standard": the conditional prior starts out as exactly N(0, I)
    prior_init: str = "standard"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ContractError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.head not in HEADS:
            raise ContractError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.family != "rnn" and self.latent < 1:
            raise ContractError(f"{self.family} needs latent >= 1")
        if self.head != "gauss" and self.mixtures < 1:
            raise ContractError("gmm heads need mixtures >= 1")
        if self.head == "gmm+bernoulli" and self.frame_dim < 2:
            raise ContractError("gmm+bernoulli needs frame_dim >= 2 (coordinates + pen)")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and v < 0:
                raise ContractError(f"{f.name} must be non-negative, got {v}")
        if self.prior_init not in ("standard", "random"):
            raise ContractError(f"prior_init must be 'standard' or 'random', got {self.prior_init!r}")
        if self.frame_dim < 1 or self.hidden < 1:
            raise ContractError("frame_dim and hidden must be positive")

    @property
    def is_variational(self):
        return self.family != "rnn"

    @property
    def x_features(self):
        return self.x_out or max(1, self.hidden // 2)

    @property
    def z_features(self):
        return self.z_out or max(1, self.hidden // 2)

    @property
    def head_size(self):
        d, j = self.frame_dim, self.mixtures
        if self.head == "gauss":
            return 2 * d
        if self.head == "gmm":
            return j + 2 * j * d
        return j + 2 * j * (d - 1) + 1

    def resolved(self):
        """Copy with derived defaults written out."""
        return replace(self, x_out=self.x_features, z_out=self.z_features)


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore


def build_params(config):
    """Register every parameter (zero-valued) for ``config``."""
    c = config
    store = ParamStore()
    Mlp.register(store, "x", c.frame_dim, c.x_width, c.x_depth, c.x_features)
    if not c.is_variational:
        LstmCell.register(store, "rnn", c.x_features, c.hidden)
        Mlp.register(store, "dec", c.hidden, c.dec_width, c.dec_depth, c.head_size)
        return store
    Mlp.register(store, "z", c.latent, c.z_width, c.z_depth, c.z_features)
    Mlp.register(store, "enc", c.x_features + c.hidden, c.enc_width, c.enc_depth, 2 * c.latent)
    if c.family == "vrnn":
        Mlp.register(store, "prior", c.hidden, c.prior_width, c.prior_depth, 2 * c.latent)
    Mlp.register(store, "dec", c.z_features + c.hidden, c.dec_width, c.dec_depth, c.head_size)
    LstmCell.register(store, "rnn", c.x_features + c.z_features, c.hidden)
    return store


def unit_sigma_preactivation():
    """Head pre-activation whose mapped standard deviation is exactly 1.0."""
    b = math.log(math.expm1(1.0 - SIGMA_FLOOR))
    for _ in range(64):
        v = float(np.logaddexp(0.0, b)) + SIGMA_FLOOR
        if v == 1.0:
            return b
        b = float(np.nextafter(b, -np.inf if v > 1.0 else np.inf))
    raise ArithmeticError("no pre-activation maps exactly to sigma = 1")


def set_standard_prior(store, config):
    """Zero the prior's output layer so it emits mu = 0, sigma = 1 for any state."""
    last = len(Mlp.layer_sizes(config.hidden, config.prior_width, config.prior_depth, 0)) - 1
    name = f"prior.layer{last}"
    store[f"{name}.W"] = np.zeros_like(store[f"{name}.W"])
    b = np.zeros(2 * config.latent)
    b[config.latent :] = unit_sigma_preactivation()
    store[f"{name}.b"] = b
    return store


def new_model(config, seed, scheme="glorot"):
    store = init_params(build_params(config), seed, scheme)
    if config.family == "vrnn" and config.prior_init == "standard" and scheme != "zeros":
        set_standard_prior(store, config)
    return Model(config, store)


def _mlp_count(n_in, width, depth, n_out):
    return sum(a * b + b for a, b in Mlp.layer_sizes(n_in, width, depth, n_out))


def param_count(config):
    """Closed-form parameter count (independent of :func:`build_params`)."""
    c = config
    p = c.hidden
    n = _mlp_count(c.frame_dim, c.x_width, c.x_depth, c.x_features)
    if not c.is_variational:
        n += 4 * p * (c.x_features + p) + 4 * p
        return n + _mlp_count(p, c.dec_width, c.dec_depth, c.head_size)
    n += _mlp_count(c.latent, c.z_width, c.z_depth, c.z_features)
    n += _mlp_count(c.x_features + p, c.enc_width, c.enc_depth, 2 * c.latent)
    if c.family == "vrnn":
        n += _mlp_count(p, c.prior_width, c.prior_depth, 2 * c.latent)
    n += _mlp_count(c.z_features + p, c.dec_width, c.dec_depth, c.head_size)
    return n + 4 * p * (c.x_features + c.z_features + p) + 4 * p


class Networks:
    """Layers of a model bound to concrete (optionally tracked) tensors."""

    def __init__(self, config, params):
        self.config = config
        self.x = Mlp.from_params(params, "x")
        self.rnn = LstmCell.from_params(params, "rnn")
        self.dec = Mlp.from_params(params, "dec")
        if config.is_variational:
            self.z = Mlp.from_params(params, "z")
            self.enc = Mlp.from_params(params, "enc")
        self.prior = Mlp.from_params(params, "prior") if config.family == "vrnn" else None


def bind(model, tape=None):
    """Return ``(networks, tensors)``; tensors are tracked on ``tape`` if given."""
    tensors = model.params.bind(tape)
    return Networks(model.config, tensors), tensors


@dataclass
class VrnnState:
    h: T.Tensor
    c: T.Tensor

    @classmethod
    def zeros(cls, batch, hidden):
        return cls(T.Tensor(np.zeros((batch, hidden))), T.Tensor(np.zeros((batch, hidden))))


class FrameDensity:
    """Output density over one frame: Gaussian, GMM, or GMM x Bernoulli(pen)."""

    def __init__(self, gauss=None, mixture=None, pen=None):
        self.gauss = gauss
        self.mixture = mixture
        self.pen = pen

    def log_density(self, x):
        if self.gauss is not None:
            return gauss_log_density(self.gauss, x)
        if self.pen is None:
            return gmm_log_density(self.mixture, x)
        d = x.shape[1]
        coords = T.slice(x, 1, 0, d - 1)
        pen = T.slice(x, 1, d - 1, d)
        return gmm_log_density(self.mixture, coords) + bernoulli_log_density(self.pen, pen)

    def sample(self, rng):
        """Draw a frame per row; returns a numpy array."""
        if self.gauss is not None:
            eps = rng.standard_normal(self.gauss.mu.shape)
            return self.gauss.mu.value + self.gauss.sigma.value * eps
        b, _, k = self.mixture.mu.shape
        u = rng.uniform(size=b)
        eps = rng.standard_normal((b, k))
        coords, _ = gmm_sample(self.mixture, u, eps)
        if self.pen is None:
            return coords.value
        pen = (rng.uniform(size=(b, 1)) < self.pen.p.value).astype(np.float64)
        return np.concatenate([coords.value, pen], axis=1)

    def mode(self):
        if self.gauss is not None:
            return self.gauss.mu.value.copy()
        coords, _ = gmm_mode_component(self.mixture)
        if self.pen is None:
            return coords.value
        pen = (self.pen.p.value > 0.5).astype(np.float64)
        return np.concatenate([coords.value, pen], axis=1)

    def arrays(self):
        """Parameter arrays keyed by name (for dumps)."""
        if self.gauss is not None:
            return {"mu": self.gauss.mu.value, "sigma": self.gauss.sigma.value}
        out = {
            "log_alpha": self.mixture.log_alpha.value,
            "mu": self.mixture.mu.value,
            "sigma": self.mixture.sigma.value,
        }
        if self.pen is not None:
            out["pen_p"] = self.pen.p.value
        return out


def head_density(config, out):
    """Interpret a decoder output layer as a :class:`FrameDensity`."""
    d, j = config.frame_dim, config.mixtures
    b = out.shape[0]
    if config.head == "gauss":
        return FrameDensity(gauss=DiagGaussian(T.slice(out, 1, 0, d), positive(T.slice(out, 1, d, 2 * d))))
    k = d if config.head == "gmm" else d - 1
    logits = T.slice(out, 1, 0, j)
    mu = T.reshape(T.slice(out, 1, j, j + j * k), (b, j, k))
    sigma = T.reshape(positive(T.slice(out, 1, j + j * k, j + 2 * j * k)), (b, j, k))
    mixture = MixtureDiagGaussian.from_logits(logits, mu, sigma)
    if config.head == "gmm":
        return FrameDensity(mixture=mixture)
    pen = BernoulliParam(T.slice(out, 1, j + 2 * j * k, j + 2 * j * k + 1))
    return FrameDensity(mixture=mixture, pen=pen)


def _split_gaussian(out, k):
    return DiagGaussian(T.slice(out, 1, 0, k), positive(T.slice(out, 1, k, 2 * k)))


def _require_variational(nets):
    if not nets.config.is_variational:
        raise ContractError(f"operation needs a vrnn family model, got {nets.config.family!r}")


def _prior_from_h(nets, h):
    if nets.prior is None:
        return DiagGaussian.standard(h.shape[0], nets.config.latent)
    return _split_gaussian(mlp_forward(nets.prior, h), nets.config.latent)


def _encode_features(nets, fx, h):
    return _split_gaussian(mlp_forward(nets.enc, T.concat([fx, h], axis=1)), nets.config.latent)


def _decode_features(nets, fz, h):
    return head_density(nets.config, mlp_forward(nets.dec, T.concat([fz, h], axis=1)))


def vrnn_prior(nets, state):
    """Conditional prior N(mu_0, sigma_0) from ``h_{t-1}``; N(0, I) for vrnn-i."""
    _require_variational(nets)
    return _prior_from_h(nets, state.h)


def vrnn_encode(nets, x_t, state):
    _require_variational(nets)
    return _encode_features(nets, mlp_forward(nets.x, x_t), state.h)


def vrnn_decode(nets, z_t, state):
    _require_variational(nets)
    return _decode_features(nets, mlp_forward(nets.z, z_t), state.h)


def vrnn_recur(nets, x_t, z_t, state):
    _require_variational(nets)
    inp = T.concat([mlp_forward(nets.x, x_t), mlp_forward(nets.z, z_t)], axis=1)
    h, c = lstm_step(nets.rnn, inp, state.h, state.c)
    return VrnnState(h, c)


def _time_major(batch):
    """Flattened [T*B x d] frames and [T*B] mask, row index t*B + b."""
    v = np.asarray(batch.values, dtype=np.float64)
    b, t, d = v.shape
    x = np.ascontiguousarray(v.transpose(1, 0, 2)).reshape(t * b, d)
    m = np.ascontiguousarray(np.asarray(batch.mask, dtype=np.float64).T).reshape(t * b)
    return x, m, (b, t, d)


@dataclass
class TeacherForced:
    """Stacked quantities of one teacher-forced VRNN pass (rows t*B + b)."""

    shape: tuple
    x: T.Tensor
    mask: np.ndarray
    posterior: DiagGaussian
    prior: DiagGaussian
    z: T.Tensor
    density: FrameDensity
    final: VrnnState = None

    def per_sequence(self, per_row):
        b, t, _ = self.shape
        masked = per_row * T.Tensor(self.mask)
        return T.sum(T.reshape(masked, (t, b)), axis=0)


def teacher_forced(nets, batch, noise, state=None):
    """Run a VRNN over ``batch`` with posterior samples ``mu + sigma * noise[t]``.

    ``state`` is the initial recurrent state (zeros by default).
    """
    _require_variational(nets)
    x_np, mask, (b, t, d) = _time_major(batch)
    k = nets.config.latent
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (t, b, k):
        raise DimensionError(f"noise must have shape {(t, b, k)}, got {noise.shape}")
    x = T.Tensor(x_np)
    fx_all = T.reshape(mlp_forward(nets.x, x), (t, b, nets.config.x_features))
    state = state or VrnnState.zeros(b, nets.config.hidden)
    hs, mus, sigmas, zs, fzs = [], [], [], [], []
    for i in range(t):
        fx = T.index(fx_all, 0, i)
        q = _encode_features(nets, fx, state.h)
        z = reparam_sample(q, noise[i])
        fz = mlp_forward(nets.z, z)
        hs.append(state.h)
        mus.append(q.mu)
        sigmas.append(q.sigma)
        zs.append(z)
        fzs.append(fz)
        h, c = lstm_step(nets.rnn, T.concat([fx, fz], axis=1), state.h, state.c)
        state = VrnnState(h, c)

    def flat(parts):
        return T.reshape(T.stack(parts, 0), (t * b, parts[0].shape[1]))

    H = flat(hs)
    posterior = DiagGaussian(flat(mus), flat(sigmas))
    prior = _prior_from_h(nets, H)
    density = _decode_features(nets, flat(fzs), H)
    return TeacherForced((b, t, d), x, mask, posterior, prior, flat(zs), density, state)


@dataclass
class StepOutput:
    kl_t: np.ndarray
    recon_log_t: np.ndarray
    posterior: DiagGaussian
    prior: DiagGaussian
    z_t: np.ndarray


def _step_outputs(tf, kl_rows, recon_rows):
    b, t, _ = tf.shape
    kl = kl_rows.value.reshape(t, b)
    rec = recon_rows.value.reshape(t, b)
    shp = (t, b, -1)
    qm, qs = tf.posterior.mu.value.reshape(shp), tf.posterior.sigma.value.reshape(shp)
    pm, ps = tf.prior.mu.value.reshape(shp), tf.prior.sigma.value.reshape(shp)
    z = tf.z.value.reshape(shp)
    return [
        StepOutput(
            kl[i],
            rec[i],
            DiagGaussian(T.Tensor(qm[i]), T.Tensor(qs[i])),
            DiagGaussian(T.Tensor(pm[i]), T.Tensor(ps[i])),
            z[i],
        )
        for i in range(t)
    ]


@dataclass
class ElboResult:
    value: T.Tensor  # mean over sequences
    per_sequence: T.Tensor
    frames: int
    _tf: TeacherForced = field(repr=False)
    _kl: T.Tensor = field(repr=False)
    _recon: T.Tensor = field(repr=False)

    @property
    def steps(self):
        return _step_outputs(self._tf, self._kl, self._recon)


def elbo_terms(nets, batch, noise, kl="closed", state=None):
    """Timestep-wise lower bound with full per-sequence breakdown.

    ``kl="closed"`` uses the analytic Gaussian KL; ``kl="sample"`` replaces it
    with the single-sample estimate ``log q(z) - log p(z)`` at the drawn ``z``.
    """
    tf = teacher_forced(nets, batch, noise, state)
    recon = tf.density.log_density(tf.x)
    if kl == "closed":
        kl_rows = T.sum(gauss_kl_terms(tf.posterior, tf.prior), axis=1)
    elif kl == "sample":
        kl_rows = gauss_log_density(tf.posterior, tf.z) - gauss_log_density(tf.prior, tf.z)
    else:
        raise ValueError(f"kl must be 'closed' or 'sample', got {kl!r}")
    per_seq = tf.per_sequence(recon - kl_rows)
    return ElboResult(T.mean(per_seq), per_seq, int(tf.mask.sum()), tf, kl_rows, recon)


def elbo(nets, batch, noise, kl="closed"):
    """Mean ELBO over sequences and the per-step outputs."""
    res = elbo_terms(nets, batch, noise, kl)
    return res.value, res.steps


def draw_noise(rng, batch, k):
    v = np.asarray(batch.values)
    return rng.standard_normal((v.shape[1], v.shape[0], k))


class _Repeated:
    def __init__(self, batch, k):
        self.values = np.repeat(np.asarray(batch.values), k, axis=0)
        self.mask = np.repeat(np.asarray(batch.mask), k, axis=0)


def is_log_weights(nets, batch, K, rng):
    """Log importance weights, shape [B x K], with proposals from the posterior."""
    _require_variational(nets)
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    rep = _Repeated(batch, K)
    noise = rng.standard_normal((rep.values.shape[1], rep.values.shape[0], nets.config.latent))
    return is_log_weights_from_noise(nets, rep, noise).reshape(-1, K)


def is_log_weights_from_noise(nets, batch, noise):
    tf = teacher_forced(nets, batch, noise)
    rows = (
        tf.density.log_density(tf.x)
        + gauss_log_density(tf.prior, tf.z)
        - gauss_log_density(tf.posterior, tf.z)
    )
    return tf.per_sequence(rows).value


def _logmeanexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def is_log_likelihood_per_sequence(nets, batch, K, rng):
    return _logmeanexp(is_log_weights(nets, batch, K, rng), axis=1)


def is_log_likelihood(nets, batch, K, rng):
    """Importance-sampled marginal log-likelihood, mean over sequences."""
    return float(np.mean(is_log_likelihood_per_sequence(nets, batch, K, rng)))


def _rnn_pass(nets, batch, state=None):
    if nets.config.is_variational:
        raise ContractError(f"rnn_nll needs the rnn family, got {nets.config.family!r}")
    x_np, mask, (b, t, d) = _time_major(batch)
    x = T.Tensor(x_np)
    fx_all = T.reshape(mlp_forward(nets.x, x), (t, b, nets.config.x_features))
    state = state or VrnnState.zeros(b, nets.config.hidden)
    hs = []
    for i in range(t):
        hs.append(state.h)
        h, c = lstm_step(nets.rnn, T.index(fx_all, 0, i), state.h, state.c)
        state = VrnnState(h, c)
    H = T.reshape(T.stack(hs, 0), (t * b, nets.config.hidden))
    density = head_density(nets.config, mlp_forward(nets.dec, H))
    rows = density.log_density(x) * T.Tensor(mask)
    return T.sum(T.reshape(rows, (t, b)), axis=0), int(mask.sum()), state


def rnn_log_likelihood(nets, batch, state=None):
    """Exact per-sequence log-likelihood [B] and the number of valid frames."""
    ll, frames, _ = _rnn_pass(nets, batch, state)
    return ll, frames


def rnn_nll(nets, batch):
    """Mean over sequences of the negative total log-likelihood."""
    ll, _, _ = _rnn_pass(nets, batch)
    return -T.mean(ll)


@dataclass
class Generated:
    frames: np.ndarray  # [n x T x d]
    params: list = field(default_factory=list)  # per step: dict of arrays
    latents: np.ndarray = None  # [n x T x k] for vrnn families


def generate(model, steps, seed, n=1, noise_free=False, keep_params=False):
    """Ancestral sampling of ``n`` sequences of ``steps`` frames.

    With ``noise_free`` every draw is replaced by its mode (z = prior mean,
    GMM component = argmax weight, x = component mean), giving the
    prior-mean trajectory.
    """
    nets, _ = bind(model)
    cfg = model.config
    d = cfg.frame_dim
    out = np.zeros((n, steps, d))
    if n == 0 or steps == 0:
        return Generated(out, [], np.zeros((n, steps, cfg.latent)) if cfg.is_variational else None)
    rz = stream(seed, "generate", "z")
    rx = stream(seed, "generate", "x")
    state = VrnnState.zeros(n, cfg.hidden)
    zs = np.zeros((n, steps, cfg.latent)) if cfg.is_variational else None
    dumps = []
    for t in range(steps):
        if cfg.is_variational:
            prior = _prior_from_h(nets, state.h)
            eps = np.zeros(prior.mu.shape) if noise_free else rz.standard_normal(prior.mu.shape)
            z = reparam_sample(prior, eps)
            fz = mlp_forward(nets.z, z)
            density = _decode_features(nets, fz, state.h)
            zs[:, t] = z.value
        else:
            density = head_density(cfg, mlp_forward(nets.dec, state.h))
        x = density.mode() if noise_free else density.sample(rx)
        out[:, t] = x
        if keep_params:
            dumps.append(density.arrays())
        fx = mlp_forward(nets.x, T.Tensor(x))
        inp = T.concat([fx, fz], axis=1) if cfg.is_variational else fx
        h, c = lstm_step(nets.rnn, inp, state.h, state.c)
        state = VrnnState(h, c)
    return Generated(out, dumps, zs)


@dataclass
class LatentTrace:
    delta: np.ndarray  # [T-1]
    kl: np.ndarray  # [T]
    kl_dims: np.ndarray  # [T x k]
    mu: np.ndarray  # [T x k] posterior means


class _Single:
    def __init__(self, seq):
        seq = np.asarray(seq, dtype=np.float64)
        self.values = seq[None]
        self.mask = np.ones((1, seq.shape[0]))


def latent_trace(nets, sequence, noise=None):
    """Posterior-mean movement and KL to the conditional prior along a sequence.

    The recurrence is driven by ``z_t = mu_t + sigma_t * noise_t``; the default
    (``noise=None``) uses the posterior means.
    """
    _require_variational(nets)
    seq = np.asarray(sequence, dtype=np.float64)
    t = seq.shape[0]
    k = nets.config.latent
    noise = np.zeros((t, 1, k)) if noise is None else np.asarray(noise).reshape(t, 1, k)
    tf = teacher_forced(nets, _Single(seq), noise)
    kl_dims = gauss_kl_terms(tf.posterior, tf.prior).value
    mu = tf.posterior.mu.value
    delta = np.sum(np.diff(mu, axis=0) ** 2, axis=1)
    return LatentTrace(delta, kl_dims.sum(axis=1), kl_dims, mu)


def nats_per_frame(total, frames):
    return total / frames if frames else math.nan
