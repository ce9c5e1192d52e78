"""Acceptance checks; each prints one PASS/FAIL line and is summarized at the end."""

import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

import desk
from conftest import record_criterion
from vrnn import data as D
from vrnn import distributions as Dist
from vrnn import models as M
from vrnn import tensor as T
from vrnn.checkpoint import checkpoint_bytes, parse_checkpoint
from vrnn.config import load_preset
from vrnn.evaluation import elbo_per_sequence, is_per_sequence, rnn_ll_per_sequence, score
from vrnn.optim import TrainConfig, fit


def _unflatten(store, flat):
    out, off = {}, 0
    for name, arr in store.items():
        part = T.slice(flat, 0, off, off + arr.size)
        out[name] = T.reshape(part, arr.shape)
        off += arr.size
    return out


# --- 1 ------------------------------------------------------------------------


def _distribution_checks(rng):
    b, k, j = 3, 2, 3
    mu0, x0 = rng.normal(size=(b, k)), rng.normal(size=(b, k))
    pre0 = rng.normal(size=(b, k))
    mu1, pre1 = rng.normal(size=(b, k)), rng.normal(size=(b, k))
    eps = rng.normal(size=(b, k))
    logits0 = rng.normal(size=(b, j))
    gmu0, gpre0 = rng.normal(size=(b, j, k)), rng.normal(size=(b, j, k))
    bits = (rng.uniform(size=(b, 4)) < 0.5).astype(float)
    blog0 = rng.normal(size=(b, 4))

    def gauss(mu, pre):
        return Dist.DiagGaussian(mu, Dist.positive(pre))

    checks = {
        "gauss_log_density/mu": (lambda v: T.sum(Dist.gauss_log_density(gauss(v, T.tensor(pre0)), T.tensor(x0))), mu0),
        "gauss_log_density/sigma": (lambda v: T.sum(Dist.gauss_log_density(gauss(T.tensor(mu0), v), T.tensor(x0))), pre0),
        "gauss_log_density/x": (lambda v: T.sum(Dist.gauss_log_density(gauss(T.tensor(mu0), T.tensor(pre0)), v)), x0),
        "gauss_kl/q.mu": (lambda v: T.sum(Dist.gauss_kl(gauss(v, T.tensor(pre0)), gauss(T.tensor(mu1), T.tensor(pre1)))), mu0),
        "gauss_kl/q.sigma": (lambda v: T.sum(Dist.gauss_kl(gauss(T.tensor(mu0), v), gauss(T.tensor(mu1), T.tensor(pre1)))), pre0),
        "gauss_kl/p.mu": (lambda v: T.sum(Dist.gauss_kl(gauss(T.tensor(mu0), T.tensor(pre0)), gauss(v, T.tensor(pre1)))), mu1),
        "gauss_kl/p.sigma": (lambda v: T.sum(Dist.gauss_kl(gauss(T.tensor(mu0), T.tensor(pre0)), gauss(T.tensor(mu1), v))), pre1),
        "reparam_sample/mu": (lambda v: T.sum(T.square(Dist.reparam_sample(gauss(v, T.tensor(pre0)), eps))), mu0),
        "reparam_sample/sigma": (lambda v: T.sum(T.square(Dist.reparam_sample(gauss(T.tensor(mu0), v), eps))), pre0),
    }

    def mix(logits, mu, pre):
        return Dist.MixtureDiagGaussian.from_logits(logits, mu, Dist.positive(pre))

    def gmm(which):
        def f(v):
            args = [T.tensor(logits0), T.tensor(gmu0), T.tensor(gpre0)]
            args[which] = v
            return T.sum(Dist.gmm_log_density(mix(*args), T.tensor(x0)))

        return f

    checks["gmm_log_density/logits"] = (gmm(0), logits0)
    checks["gmm_log_density/mu"] = (gmm(1), gmu0)
    checks["gmm_log_density/sigma"] = (gmm(2), gpre0)
    checks["gmm_log_density/x"] = (
        lambda v: T.sum(Dist.gmm_log_density(mix(T.tensor(logits0), T.tensor(gmu0), T.tensor(gpre0)), v)),
        x0,
    )
    checks["bernoulli_log_density/logit"] = (lambda v: T.sum(Dist.bernoulli_log_density(Dist.BernoulliParam(v), bits)), blog0)
    return {name: T.grad_check(f, x) for name, (f, x) in checks.items()}


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    cfg = M.ModelConfig(
        family="vrnn", head="gauss", frame_dim=2, latent=2, hidden=8, x_out=4, z_out=4,
        x_depth=2, x_width=5, z_depth=2, z_width=5, enc_depth=2, enc_width=5,
        dec_depth=2, dec_width=5, prior_depth=2, prior_width=5, prior_init="random",
    )
    model = M.new_model(cfg, 7)
    # zero biases with h0 = 0 put the prior's relus exactly on their kinks
    for name, arr in list(model.params.items()):
        if name.endswith(".b"):
            model.params[name] = arr + rng.normal(scale=0.1, size=arr.shape)
    batch = D.make_batch([rng.normal(size=(3, 2)), rng.normal(size=(2, 2))])
    noise = rng.normal(size=(3, 2, 2))

    def neg_elbo(flat):
        nets = M.Networks(cfg, _unflatten(model.params, flat))
        return -M.elbo_terms(nets, batch, noise).value

    elbo_err = T.grad_check(neg_elbo, model.params.flat())
    dist_err = _distribution_checks(rng)
    worst = max(dist_err, key=dist_err.get)
    elapsed = time.perf_counter() - t0
    ok = elbo_err < 1e-4 and dist_err[worst] < 1e-5 and elapsed < 60
    record_criterion(
        1, ok,
        f"ELBO grad rel err {elbo_err:.2e} (< 1e-4, {model.params.count()} params); "
        f"worst distribution op {worst} {dist_err[worst]:.2e} (< 1e-5); {elapsed:.1f}s (< 60s)",
    )
    assert ok


# --- 2 ------------------------------------------------------------------------


def test_c02_density_normalization():
    def gauss_pdf(mu, sigma):
        d = Dist.DiagGaussian(T.tensor([[mu]]), T.tensor([[sigma]]))
        return lambda x: math.exp(Dist.gauss_log_density(d, T.tensor([[x]])).item())

    g = gauss_pdf(0.3, 0.7)
    g_mass = integrate.quad(g, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
    alpha = np.log([[0.2, 0.5, 0.3]])
    mu = np.array([[[-2.0], [0.5], [3.0]]])
    sigma = np.array([[[0.4], [1.2], [0.25]]])
    m = Dist.MixtureDiagGaussian(T.tensor(alpha), T.tensor(mu), T.tensor(sigma))

    def mix_pdf(x):
        return math.exp(Dist.gmm_log_density(m, T.tensor([[x]])).item())

    gmm_mass = integrate.quad(mix_pdf, -np.inf, np.inf, points=None, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    logits = np.linspace(-40, 40, 1001).reshape(-1, 1)
    b = Dist.BernoulliParam(T.tensor(logits))
    totals = Dist.bernoulli_prob(b, np.ones_like(logits)) + Dist.bernoulli_prob(b, np.zeros_like(logits))
    ok = abs(g_mass - 1) < 1e-6 and abs(gmm_mass - 1) < 1e-6 and bool(np.all(totals == 1.0))
    record_criterion(
        2, ok,
        f"Gaussian mass {g_mass:.12f}, GMM mass {gmm_mass:.12f} (1 +- 1e-6); "
        f"Bernoulli p(0)+p(1) == 1 exactly on {logits.size} logits: {bool(np.all(totals == 1.0))}",
    )
    assert ok


# --- 3 ------------------------------------------------------------------------


def test_c03_kl_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    k, n = 3, 10**6
    worst_z = 0.0
    for _ in range(10):
        qm, pm = rng.normal(size=k), rng.normal(size=k)
        qs, ps = rng.uniform(0.3, 2.0, size=k), rng.uniform(0.3, 2.0, size=k)
        q = Dist.DiagGaussian(T.tensor(qm[None]), T.tensor(qs[None]))
        p = Dist.DiagGaussian(T.tensor(pm[None]), T.tensor(ps[None]))
        closed = Dist.gauss_kl(q, p).item()
        z = qm + qs * rng.standard_normal((n, k))
        # log-ratio written out independently of the library
        lr = np.sum(np.log(ps / qs) - 0.5 * ((z - qm) / qs) ** 2 + 0.5 * ((z - pm) / ps) ** 2, axis=1)
        se = lr.std(ddof=1) / math.sqrt(n)
        worst_z = max(worst_z, abs(lr.mean() - closed) / se)
    q = Dist.DiagGaussian(T.tensor(rng.normal(size=(5, k))), T.tensor(rng.uniform(0.1, 3.0, size=(5, k))))
    self_kl = Dist.gauss_kl_terms(q, q).value
    elapsed = time.perf_counter() - t0
    ok = worst_z < 3 and bool(np.all(self_kl == 0.0)) and elapsed < 30
    record_criterion(
        3, ok,
        f"max |MC - closed| = {worst_z:.2f} SE over 10 pairs (< 3); KL(q,q) == 0 exactly: "
        f"{bool(np.all(self_kl == 0.0))}; {elapsed:.1f}s (< 30s)",
    )
    assert ok


# --- 4 ------------------------------------------------------------------------


@pytest.mark.slow
def test_c04_bound_ordering(desk_runs):
    model, _, test = desk_runs("vrnn", 0)
    t0 = time.perf_counter()
    elbo = float(np.mean(elbo_per_sequence(model, test, 0)))
    is40, is5 = [], []
    for s in range(100):
        is40.append(float(np.mean(is_per_sequence(model, test, 40, 10_000 + s))))
        is5.append(float(np.mean(is_per_sequence(model, test, 5, 10_000 + s))))
    elapsed = time.perf_counter() - t0
    m40, m5 = float(np.mean(is40)), float(np.mean(is5))
    ok = is40[0] >= elbo and m40 >= m5 and elapsed < 300
    record_criterion(
        4, ok,
        f"IS(K=40) {is40[0]:.3f} >= ELBO {elbo:.3f} per sequence; mean over 100 seeds "
        f"IS(K=40) {m40:.3f} >= IS(K=5) {m5:.3f}; {elapsed:.0f}s (< 300s)",
    )
    assert ok


# --- 5 ------------------------------------------------------------------------


def test_c05_is_consistency():
    cfg = M.ModelConfig(
        family="vrnn", frame_dim=2, latent=1, hidden=4, x_out=3, z_out=3,
        x_depth=1, x_width=6, z_depth=1, z_width=6, enc_depth=1, enc_width=6,
        dec_depth=1, dec_width=6, prior_depth=1, prior_width=6, prior_init="random",
    )
    model = M.new_model(cfg, 5)
    nets, _ = M.bind(model)
    x = np.array([[0.4, -0.9]])
    state = M.VrnnState.zeros(1, cfg.hidden)
    prior = M.vrnn_prior(nets, state)
    pm, ps = prior.mu.item(), prior.sigma.item()
    nodes, weights = np.polynomial.hermite.hermgauss(200)
    z = pm + math.sqrt(2.0) * ps * nodes
    zs = M.VrnnState.zeros(z.size, cfg.hidden)
    dens = M.vrnn_decode(nets, T.tensor(z[:, None]), zs)
    log_px_z = dens.log_density(T.tensor(np.repeat(x, z.size, axis=0))).value
    true = math.log(np.sum(weights * np.exp(log_px_z)) / math.sqrt(math.pi))
    ds = D.SequenceDataset([x], 2)
    est = float(is_per_sequence(model, ds, 10_000, 17)[0])
    ratio = math.exp(est - true)
    ok = abs(ratio - 1.0) < 0.005
    record_criterion(
        5, ok,
        f"IS(K=1e4) log p(x) {est:.5f} vs Gauss-Hermite {true:.5f}; "
        f"p ratio {ratio:.5f} (within 0.5%)",
    )
    assert ok


# --- 6 ------------------------------------------------------------------------


@pytest.mark.slow
def test_c06_desk_ordering(desk_runs):
    t0 = time.perf_counter()
    budgets = {f: M.param_count(load_preset(desk.PRESETS[f]).model) for f in desk.PRESETS}
    within = all(abs(b / budgets["vrnn"] - 1) <= 0.10 for b in budgets.values())
    rows = []
    for seed in desk.SEEDS:
        out = {}
        for fam in ("vrnn", "vrnn-i"):
            model, _, test = desk_runs(fam, seed)
            out[fam] = score(is_per_sequence(model, test, 40, 0), test).per_frame
        model, _, test = desk_runs("rnn", seed)
        out["rnn"] = score(rnn_ll_per_sequence(model, test), test).per_frame
        rows.append(out)
        print(f"  seed {seed}: vrnn IS {out['vrnn']:.3f}  vrnn-i IS {out['vrnn-i']:.3f}  rnn exact {out['rnn']:.3f}")
    gap_rnn = float(np.median([r["vrnn"] - r["rnn"] for r in rows]))
    gap_i = float(np.median([r["vrnn"] - r["vrnn-i"] for r in rows]))
    elapsed = time.perf_counter() - t0
    a = gap_rnn >= 0.1 and all(r["vrnn"] - r["rnn"] >= 0.1 for r in rows)
    b = gap_i >= 0.0
    ok = within and a and b
    detail = ", ".join(f"{f} {n}" for f, n in budgets.items())
    record_criterion(
        6, ok,
        f"params {detail} (within 10%: {within}); VRNN - RNN median {gap_rnn:+.3f} nat/frame "
        f"(>= 0.1: {a}); VRNN - VRNN-I median {gap_i:+.3f} (>= 0: {b}); eval {elapsed:.0f}s",
    )
    assert within and a, "VRNN vs RNN ordering or parameter budget"
    assert b, "VRNN (conditional prior) did not reach VRNN-I on the regime-switch data"


# --- 7 ------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_latent_transitions(desk_runs):
    ratios = []
    for seed in desk.SEEDS:
        model, _, test = desk_runs("vrnn", seed)
        ratios.append(desk.delta_ratio(model, test))
    med = float(np.median(ratios))
    ok = med > 2.0
    record_criterion(7, ok, f"delta near switches / elsewhere: {[round(r, 2) for r in ratios]}, median {med:.2f} (> 2)")
    assert ok


# --- 8 ------------------------------------------------------------------------


@pytest.mark.slow
def test_c08_overfit_single_sequence():
    cfg = replace(load_preset("desk-smoke").model, frame_dim=1)
    seq = D.SequenceDataset([np.full((40, 1), 0.5)], 1)
    tcfg = TrainConfig(batch_size=1, max_epochs=500, patience=500, lr=0.03, seed=0)
    model = M.new_model(cfg, 0)
    state = fit(model, seq, seq, tcfg)
    model.params = state.best_params
    nets, _ = M.bind(model)
    batch = D.make_batch(seq.sequences)
    noise = np.random.default_rng(0).standard_normal((40, 1, cfg.latent))
    recon = float(M.elbo_terms(nets, batch, noise)._recon.value.sum()) / 40
    bound = cfg.frame_dim * (-Dist.HALF_LOG_2PI - math.log(Dist.SIGMA_FLOOR))
    ok = bound - recon <= 5.0 and state.epoch <= 500
    record_criterion(
        8, ok,
        f"reconstruction {recon:.3f} nats/frame vs sigma-floor bound {bound:.3f} "
        f"(gap {bound - recon:.3f} <= 5) after {state.epoch} epochs",
    )
    assert ok


# --- 9 ------------------------------------------------------------------------


def _vrnn(*args):
    return subprocess.run([sys.executable, "-m", "vrnn.cli", "-q", *map(str, args)], capture_output=True, text=True)


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c09_determinism(tmp_path):
    outs = []
    for run in ("a", "b"):
        base = tmp_path / run
        steps = [
            ("prepare", "--kind", "synth", "--n", 40, "--steps", 20, "--seed", 4, "--out", base / "data"),
            ("train", "--preset", "desk-smoke", "--set", "train.max_epochs=2", "--seed", 4,
             "--data", base / "data", "--out", base / "run", "--no-timing"),
            ("eval", "--checkpoint", base / "run" / "best.ckpt", "--data", base / "data" / "test.vseq",
             "--samples", 5, "--seed", 4, "--out", base / "eval"),
            ("sample", "--checkpoint", base / "run" / "best.ckpt", "--steps", 10, "--n", 3, "--seed", 4,
             "--params", "--out", base / "sample"),
            ("analyze", "--checkpoint", base / "run" / "best.ckpt", "--data", base / "data" / "test.vseq",
             "--out", base / "analyze"),
        ]
        for args in steps:
            res = _vrnn(*args)
            assert res.returncode == 0, res.stderr
        outs.append(_tree_bytes(base))
    same = outs[0] == outs[1]
    record_criterion(9, same, f"{len(outs[0])} output files from prepare/train/eval/sample/analyze byte-identical: {same}")
    assert same


# --- 10 -----------------------------------------------------------------------


def test_c10_format_fidelity(fixtures_dir):
    wav = D.load_wav((fixtures_dir / "four_samples.wav").read_bytes())
    wav_ok = wav.rate == 16000 and wav.channels == 1 and wav.data[:, 0].tolist() == [0, 1000, -32768, 32767]
    vs = D.container_read(fixtures_dir / "two_seqs.vseq")
    vseq_ok = [s.shape for s in vs.sequences] == [(3, 2), (1, 2)]
    vseq_ok = vseq_ok and vs.sequences[0].tolist() == [[0.0, 0.5], [1.0, 1.5], [2.0, 2.5]]
    vseq_ok = vseq_ok and D.container_bytes(vs) == (fixtures_dir / "two_seqs.vseq").read_bytes()
    model = M.new_model(load_preset("desk-smoke").model, 2)
    blob = checkpoint_bytes(model, meta={"epoch": 3})
    back, _, meta = parse_checkpoint(blob)
    ckpt_ok = back.params.bitwise_equal(model.params) and back.config == model.config
    ckpt_ok = ckpt_ok and checkpoint_bytes(back, meta=meta) == blob
    clip = D.load_wav(D.encode_wav(16000, np.arange(8000, dtype=np.int16) % 300))
    frames = D.frame(clip)
    clip_ok = frames.shape == (40, 200)
    ok = wav_ok and vseq_ok and ckpt_ok and clip_ok
    record_criterion(
        10, ok,
        f"WAV fixture {wav_ok}; VSEQ fixture and round trip {vseq_ok}; checkpoint bit-exact {ckpt_ok}; "
        f"8000 samples @16 kHz -> {frames.shape[0]} frames",
    )
    assert ok
