"""Command-line entry point: ``vrnn {prepare,train,eval,sample,analyze}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import models as M
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_values, format_config, load_preset, preset_names, read_config
from .errors import ContractError, DimensionError, FormatError, NumericError
from .evaluation import elbo_per_sequence, is_per_sequence, rnn_ll_per_sequence, score
from .optim import AdamState, EpochRecord, TrainingState, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "valid", "test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v):
    return repr(float(v))


# --- configuration ----------------------------------------------------------


def resolve_config(args):
    """Defaults < preset < config file < --set < dedicated flags."""
    cfg = RunConfig()
    if getattr(args, "preset", None):
        cfg = load_preset(args.preset, cfg)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = read_config(path, cfg)
    values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val
    if getattr(args, "seed", None) is not None:
        values["run.seed"] = str(args.seed)
    if getattr(args, "samples", None) is not None:
        values["run.eval_samples"] = str(args.samples)
    return apply_values(cfg, values)


def _read_vseq(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    try:
        return D.container_read(path)
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _check_dim(model, ds, what):
    if len(ds) and ds.dim != model.config.frame_dim:
        raise DataError(f"{what} has frame dim {ds.dim} but the model expects {model.config.frame_dim}")


# --- prepare ----------------------------------------------------------------


def _expand_inputs(inputs, suffix):
    files = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() == suffix))
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"input not found: {p}")
    if not files:
        raise DataError(f"no {suffix} inputs found")
    return files


def _ingest_wav(files, frame_len, clip_frames):
    seqs = []
    for f in files:
        try:
            frames = D.frame(D.load_wav(f.read_bytes()), frame_len)
        except (FormatError, ContractError) as exc:
            raise DataError(f"{f}: {exc}") from exc
        if clip_frames:
            seqs.extend(frames[s : s + clip_frames] for s in range(0, len(frames) - clip_frames + 1, clip_frames))
        else:
            seqs.append(frames)
    if not seqs:
        raise DataError("inputs too short to form any clip")
    return D.SequenceDataset(seqs, frame_len)


def _ingest_strokes(files):
    seqs = []
    for f in files:
        try:
            seqs.extend(D.load_strokes(f.read_text(encoding="utf-8")).sequences)
        except (FormatError, UnicodeDecodeError) as exc:
            raise DataError(f"{f}: {exc}") from exc
    if not seqs:
        raise DataError("no stroke sequences found")
    return D.SequenceDataset(seqs, 3)


def _labels_text(labels):
    return "".join(" ".join(str(int(v)) for v in row) + "\n" for row in labels)


def cmd_prepare(args):
    seed = args.seed or 0
    if args.kind == "synth":
        if args.inputs:
            raise UsageError("synth takes no inputs")
        ds = D.synth_regime_switching(args.n, args.steps, args.dim, seed)
        exclude = ()
    elif args.kind == "wav":
        ds = _ingest_wav(_expand_inputs(args.inputs, ".wav"), args.frame_len, args.clip_frames)
        exclude = ()
    else:
        ds = _ingest_strokes(_expand_inputs(args.inputs, ".txt"))
        exclude = (2,)
    try:
        parts = D.split(ds, seed)
    except ContractError as exc:
        raise DataError(str(exc)) from exc
    stats = D.compute_stats(parts[0], exclude)
    # everything is computed before the first write, so errors leave nothing behind
    outputs = {"stats.json": stats.to_json().encode()}
    for name, part in zip(SPLITS, parts):
        outputs[f"{name}.vseq"] = D.container_bytes(D.normalize(part, stats))
        if part.labels is not None:
            outputs[f"{name}.states"] = _labels_text(part.labels).encode()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, buf in outputs.items():
        (out / name).write_bytes(buf)
    counts = "/".join(str(len(p)) for p in parts)
    print(f"prepared {len(ds)} sequences (train/valid/test {counts}), frame dim {ds.dim} -> {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def _state_extra(state):
    extra = {}
    for n in state.params.names():
        extra[f"adam.m/{n}"] = state.adam.m[n]
        extra[f"adam.v/{n}"] = state.adam.v[n]
    return extra


def _state_meta(state):
    return {
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "lr": state.adam.lr,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "since_best": state.since_best,
        "stopped": state.stopped,
        "history": [[r.epoch, r.train_loss, r.valid_metric, r.wall_seconds] for r in state.history],
    }


def _restore_state(out, cfg):
    model, extra, meta = _load_model(out / "last.ckpt")
    if model.config != cfg.model:
        raise UsageError("model settings differ from the checkpoint being resumed")
    names = model.params.names()
    adam = AdamState(
        {n: extra[f"adam.m/{n}"] for n in names},
        {n: extra[f"adam.v/{n}"] for n in names},
        t=meta["adam_t"],
        lr=meta["lr"],
    )
    best = _load_model(out / "best.ckpt")[0].params if (out / "best.ckpt").is_file() else None
    state = TrainingState(
        model.params,
        adam,
        epoch=meta["epoch"],
        best_params=best,
        best_metric=meta["best_metric"],
        best_epoch=meta["best_epoch"],
        since_best=meta["since_best"],
        history=[EpochRecord(*row) for row in meta["history"]],
        stopped=meta["stopped"],
    )
    return model, state


def _metrics_text(history):
    lines = ["epoch\ttrain_loss\tvalid_metric\twall_seconds\n"]
    for r in history:
        lines.append(f"{r.epoch}\t{_fmt(r.train_loss)}\t{_fmt(r.valid_metric)}\t{_fmt(r.wall_seconds)}\n")
    return "".join(lines)


def cmd_train(args):
    cfg = resolve_config(args)
    data = Path(args.data)
    train = _read_vseq(data / "train.vseq")
    valid = _read_vseq(data / "valid.vseq")
    tcfg = cfg.train_config()
    out = Path(args.out)
    if args.resume:
        model, state = _restore_state(out, cfg)
    else:
        model, state = M.new_model(cfg.model, cfg.seed), None
    _check_dim(model, train, "training data")
    _check_dim(model, valid, "validation data")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(format_config(cfg), encoding="utf-8")

    def on_epoch(st):
        save_checkpoint(out / "last.ckpt", M.Model(cfg.model, st.params), _state_extra(st), _state_meta(st))
        if st.best_epoch == st.epoch:
            save_checkpoint(out / "best.ckpt", M.Model(cfg.model, st.best_params), meta={"epoch": st.epoch})
        (out / "metrics.tsv").write_text(_metrics_text(st.history), encoding="utf-8")

    clock = (lambda: 0.0) if args.no_timing else None
    kw = {"clock": clock} if clock else {}
    try:
        state = fit(model, train, valid, tcfg, state, on_epoch, **kw)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    print(f"trained {state.epoch} epochs; best valid {state.best_metric:.4f} at epoch {state.best_epoch} -> {out}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------


def report_rows(model, ds, K, seed):
    """Rows of (metric, sign, per_sequence, per_frame)."""
    if not model.config.is_variational:
        s = score(rnn_ll_per_sequence(model, ds), ds)
        return [("exact", "=", s.per_sequence, s.per_frame)]
    lb = score(elbo_per_sequence(model, ds, seed), ds)
    est = score(is_per_sequence(model, ds, K, seed), ds)
    return [("elbo", ">=", lb.per_sequence, lb.per_frame), (f"is_k{K}", "~=", est.per_sequence, est.per_frame)]


def cmd_eval(args):
    cfg = resolve_config(args)
    model, _, _ = _load_model(args.checkpoint)
    ds = _read_vseq(args.data)
    _check_dim(model, ds, "evaluation data")
    if not len(ds):
        raise DataError("evaluation set is empty")
    rows = report_rows(model, ds, cfg.run.eval_samples, cfg.seed)
    c = model.config
    lines = [
        f"# model\t{c.family}\t{c.head}\n",
        f"# sequences\t{len(ds)}\n",
        f"# frames\t{ds.frames}\n",
        "metric\tsign\tper_sequence\tper_frame\n",
    ]
    lines += [f"{m}\t{s}\t{ps:.6f}\t{pf:.6f}\n" for m, s, ps, pf in rows]
    text = "".join(lines)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(text, encoding="utf-8")
    return EXIT_OK


# --- sample -----------------------------------------------------------------


def _params_text(dumps):
    if not dumps:
        return ""
    cols = []
    for key, arr in dumps[0].items():
        cols += [f"{key}_{'_'.join(map(str, ix))}" for ix in np.ndindex(arr.shape[1:])]
    lines = ["seq\tt\t" + "\t".join(cols) + "\n"]
    n = next(iter(dumps[0].values())).shape[0]
    for i in range(n):
        for t, dump in enumerate(dumps):
            vals = np.concatenate([a[i].reshape(-1) for a in dump.values()])
            lines.append(f"{i}\t{t}\t" + "\t".join(_fmt(v) for v in vals) + "\n")
    return "".join(lines)


def cmd_sample(args):
    cfg = resolve_config(args)
    model, _, _ = _load_model(args.checkpoint)
    if args.steps < 0 or args.n < 0:
        raise UsageError("--steps and --n must be non-negative")
    gen = M.generate(model, args.steps, cfg.seed, args.n, args.noise_free, keep_params=args.params)
    seqs = list(gen.frames) if args.steps else []
    ds = D.SequenceDataset(seqs, model.config.frame_dim)
    if args.stats:
        try:
            stats = D.NormalizationStats.from_json(Path(args.stats).read_text(encoding="utf-8"))
            ds = D.denormalize(ds, stats)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{args.stats}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.container_write(ds, out / "samples.vseq")
    if args.params:
        (out / "params.tsv").write_text(_params_text(gen.params), encoding="utf-8")
    print(f"wrote {len(ds)} sequences of {args.steps} frames -> {out / 'samples.vseq'}")
    return EXIT_OK


# --- analyze ----------------------------------------------------------------


def trace_text(trace):
    k = trace.kl_dims.shape[1]
    lines = ["t\tdelta\tkl\t" + "\t".join(f"kl_{j}" for j in range(k)) + "\n"]
    for t in range(trace.kl.shape[0]):
        delta = "" if t == 0 else _fmt(trace.delta[t - 1])
        dims = "\t".join(_fmt(v) for v in trace.kl_dims[t])
        lines.append(f"{t + 1}\t{delta}\t{_fmt(trace.kl[t])}\t{dims}\n")
    return "".join(lines)


def cmd_analyze(args):
    resolve_config(args)
    model, _, _ = _load_model(args.checkpoint)
    if not model.config.is_variational:
        raise UsageError("analyze is unsupported for the rnn family (it has no latent variables)")
    ds = _read_vseq(args.data)
    _check_dim(model, ds, "analysis data")
    nets, _ = M.bind(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    for i in range(n):
        tr = M.latent_trace(nets, ds.sequences[i])
        (out / f"trace_{i:04d}.tsv").write_text(trace_text(tr), encoding="utf-8")
    print(f"wrote {n} trace tables -> {out}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser():
    p = _Parser(prog="vrnn", description="Variational recurrent sequence models.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI file with [model], [train] and [run] sections")
        sp.add_argument("--preset", help=f"named preset ({', '.join(preset_names())})")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
        sp.add_argument("--seed", type=int, help="root seed for every random draw")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("prepare", help="ingest, split and normalize a dataset")
    common(sp)
    sp.add_argument("--kind", required=True, choices=("wav", "strokes", "synth"))
    sp.add_argument("inputs", nargs="*", help="files or directories (wav, strokes)")
    sp.add_argument("--frame-len", type=int, default=D.FRAME_LEN)
    sp.add_argument("--clip-frames", type=int, default=0, help="cut recordings into clips of this many frames")
    sp.add_argument("--n", type=int, default=100, help="synth: number of sequences")
    sp.add_argument("--steps", type=int, default=100, help="synth: frames per sequence")
    sp.add_argument("--dim", type=int, default=8, help="synth: frame dimension")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="fit a model with early stopping")
    common(sp)
    sp.add_argument("--data", required=True, help="directory written by prepare")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    sp.add_argument("--no-timing", action="store_true", help="record wall_seconds as 0 for byte-identical reruns")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="report likelihood numbers on a dataset")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="VSEQ file")
    sp.add_argument("--samples", type=int, help="importance samples K")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="generate sequences")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--params", action="store_true", help="also write per-step density parameters")
    sp.add_argument("--stats", help="stats.json to undo normalization")
    sp.add_argument("--noise-free", action="store_true", help="take modes instead of random draws")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("analyze", help="write latent-transition traces")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="VSEQ file")
    sp.add_argument("--limit", type=int, help="only the first N sequences")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
