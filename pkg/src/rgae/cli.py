"""Command-line front end: ``rgae <command> [--config FILE] [options]``.

Every command is a pure function of its config, its input files and the
seed.  Exit codes: 0 success, 1 a ``--assert`` failed, 2 usage or config
error (including unknown config keys, which are rejected before any work).
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import data
from .config import PRESETS, ConfigError, RunConfig, describe_keys, scaled_count
from .ensemble import combine
from .evaluate import (EvalReport, ce_from_distributions, config_digest, count_parameters,
                       emit_report, evaluate_continuation, predict_distributions)
from .gae import GaeParams, PretrainState, pretrain
from .mathcore import RmsPropState
from .recurrent import BaselineRnn, RgaeModel, TrainState, train
from .serialize import (ModelFormatError, load_tensors, meta_tensor, model_from_tensors, model_tensors,
                        read_meta, save_tensors)

log = logging.getLogger("rgae")

COMMANDS = ("gen-data", "pretrain", "train", "train-baseline", "eval", "continue", "ensemble")

class UsageError(Exception):
    pass

# -- files --------------------------------------------------------------------

def _corpus_path(cfg: RunConfig, which: str) -> Path:
    return cfg.path(f"{which}_corpus", f"{which}.txt")

def _model_path(cfg: RunConfig, which: str) -> Path:
    return {
        "gae": cfg.path("gae_model", "gae.bin"),
        "rgae": cfg.path("model", "rgae.bin"),
        "baseline": cfg.path("baseline_model", "baseline.bin"),
    }[which]

def _resolve_model_ref(cfg: RunConfig, ref: str) -> Path:
    return _model_path(cfg, ref) if ref in ("rgae", "baseline") else Path(ref)

def _require(path: Path, what: str, hint: str = ""):
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}" + (f" ({hint})" if hint else ""))

def _load_corpus(path: Path, what: str):
    _require(path, what, "run gen-data first or set the corpus path")
    corpus = data.read_corpus(path)
    if not corpus:
        raise UsageError(f"{what} is empty: {path}")
    return corpus

def _eval_corpus_path(cfg: RunConfig) -> Path:
    if cfg.eval_data in ("train", "test", "valid"):
        return _corpus_path(cfg, cfg.eval_data)
    return Path(cfg.eval_data)

def _load_model(path: Path, what: str):
    _require(path, what)
    try:
        return model_from_tensors(load_tensors(path))
    except ModelFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()

# -- checkpoints and traces ----------------------------------------------------

def _trace_path(model_path: Path) -> Path:
    return model_path.with_suffix(".trace")

def _write_trace(path: Path, trace, rate_fn):
    lines = [f"epoch={i + 1} loss={loss:.6f} lr={rate_fn(i):.6g}" for i, loss in enumerate(trace)]
    data.atomic_write(path, "".join(line + "\n" for line in lines))

def _read_trace(path: Path, epochs: int) -> list[float]:
    if not path.is_file():
        raise UsageError(f"cannot resume: trace file {path} is missing")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines()[:epochs]:
        fields = dict(f.split("=", 1) for f in line.split())
        out.append(float(fields["loss"]))
    if len(out) != epochs:
        raise UsageError(f"cannot resume: {path} has {len(out)} epochs, checkpoint has {epochs}")
    return out

def _ckpt_path(model_path: Path) -> Path:
    return model_path.with_suffix(".ckpt")

def _save_checkpoint(path: Path, model, opt: RmsPropState, epoch: int):
    """Write the model file plus a checkpoint that also carries the optimizer
    state and epoch counter, so training can resume."""
    tensors = model_tensors(model)
    save_tensors(path, tensors)
    tensors.update({f"opt/{k}": v for k, v in opt.accumulators.items()})
    tensors.update([meta_tensor("epoch", epoch)])
    save_tensors(_ckpt_path(path), tensors)

def _load_checkpoint(path: Path, kind: type, opt_decay=0.9, opt_eps=1e-8):
    ckpt = _ckpt_path(path)
    _require(ckpt, "checkpoint to resume from")
    try:
        t = load_tensors(ckpt)
        model = model_from_tensors(t)
    except ModelFormatError as exc:
        raise UsageError(f"{ckpt}: {exc}") from None
    if not isinstance(model, kind):
        raise UsageError(f"{ckpt} does not hold a {kind.__name__}")
    acc = {k[4:]: v for k, v in t.items() if k.startswith("opt/")}
    epoch = read_meta(t).get("epoch", 0)
    return model, RmsPropState(opt_decay, opt_eps, acc), epoch

# -- model fitting (shared by the training and k-fold commands) ----------------

def _check_alphabet(corpus, M, what):
    bad = {s.M for s in corpus} - {M}
    if bad:
        raise UsageError(f"{what} uses alphabet size {sorted(bad)}, expected {M}")

def _checkpointer(out_path, rate_fn, model_of):
    """Per-epoch callback saving model, optimizer state and loss trace (None without a path)."""
    if out_path is None:
        return None

    def on_epoch(st):
        _save_checkpoint(out_path, model_of(st), st.opt, st.epoch)
        _write_trace(_trace_path(out_path), st.trace, rate_fn)
    return on_epoch

def fit_gae(cfg: RunConfig, corpus, out_path: Path | None = None, resume=False, stop_after=None):
    gcfg = cfg.gae_config()
    M = corpus[0].M
    if resume and out_path is not None:
        params, opt, epoch = _load_checkpoint(out_path, GaeParams)
        state = PretrainState(params, opt, epoch, _read_trace(_trace_path(out_path), epoch))
    else:
        params = GaeParams.init(cfg.gae_context, M, cfg.gae_factors, cfg.gae_mappings, cfg.seed,
                                gain=cfg.gae_init_gain)
        state = None
    _check_alphabet(corpus, params.M, "training corpus")
    on_epoch = _checkpointer(out_path, gcfg.lr.rate, lambda st: st.params)
    state = pretrain(corpus, params if state is None else state.params, gcfg, state, stop_after, on_epoch)
    return state.params, state.trace

def _fit_recurrent(make_model, tcfg, corpus, out_path, resume, stop_after, kind):
    state = None
    model = None
    if resume and out_path is not None:
        model, opt, epoch = _load_checkpoint(out_path, kind)
        state = TrainState(model, opt, epoch, _read_trace(_trace_path(out_path), epoch))
    else:
        model = make_model()
    _check_alphabet(corpus, model.M, "training corpus")
    on_epoch = _checkpointer(out_path, tcfg.lr.rate, lambda st: st.model)
    state = train(model, corpus, tcfg, state, stop_after, on_epoch)
    return state.model, state.trace

def fit_rgae(cfg: RunConfig, corpus, gae: GaeParams | None, out_path=None, resume=False, stop_after=None):
    """``gae`` may be None only when resuming from a checkpoint."""
    make = lambda: RgaeModel.init(gae.copy(), cfg.hidden, seed=cfg.seed)  # noqa: E731
    return _fit_recurrent(make, cfg.train_config(), corpus, out_path, resume, stop_after, RgaeModel)

def fit_baseline(cfg: RunConfig, corpus, out_path=None, resume=False, stop_after=None):
    make = lambda: BaselineRnn.init(corpus[0].M, cfg.rnn_hidden, window=cfg.rnn_window, seed=cfg.seed)  # noqa: E731
    return _fit_recurrent(make, cfg.baseline_config(), corpus, out_path, resume, stop_after, BaselineRnn)

KFOLD_KINDS = {"rgae": RgaeModel.kind, "baseline": BaselineRnn.kind}

def fit_kind(cfg: RunConfig, kind: str, corpus):
    """Train a fresh model of ``kind`` ('rgae' includes GAE pre-training) in memory."""
    if kind == "rgae":
        gae, _ = fit_gae(cfg, corpus)
        return fit_rgae(cfg, corpus, gae)[0]
    if kind == "baseline":
        return fit_baseline(cfg, corpus)[0]
    raise UsageError(f"k-fold evaluation needs member kinds 'rgae' or 'baseline', not {kind!r}")

# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> dict:
    out = {}
    if cfg.dataset == "scale-melodies":
        n = scaled_count(cfg.melody_count, args.scale)
        corpus = data.scale_melodies(n, cfg.melody_length, cfg.M, seed=cfg.seed, max_step=cfg.melody_max_step)
        splits = {"train": corpus}
        manifest = {"dataset": cfg.dataset, "melody_count": n, "melody_length": cfg.melody_length,
                    "melody_max_step": cfg.melody_max_step}
    else:
        spec = cfg.dataset_spec(args.scale)
        source = None
        if cfg.fragment_source != "random-walk":
            source = data.CorpusFragments(_load_corpus(Path(cfg.fragment_source), "fragment corpus"))
        train_s, test_s, valid_s = data.generate_scheme_dataset(spec, source)
        splits = {"train": train_s, "test": test_s, "valid": valid_s}
        manifest = {"dataset": cfg.dataset, "schemes": ";".join(s.name for s in spec.schemes),
                    "fragment_lengths": ",".join(map(str, spec.fragment_lengths)),
                    "fragment_source": cfg.fragment_source,
                    "n_train": spec.n_train, "n_test": spec.n_test, "n_valid": spec.n_eval,
                    "sequence_length": spec.sequence_length}
    manifest = {"seed": cfg.seed, "M": cfg.M, "scale": args.scale, **manifest}
    for name, corpus in splits.items():
        p = _corpus_path(cfg, name)
        data.write_corpus(p, corpus, cfg.M)
        manifest[f"{name}_file"] = str(p)
        manifest[f"{name}_sequences"] = len(corpus)
        manifest[f"{name}_sha256"] = _sha256(p)
        out[f"{name}_sequences"] = float(len(corpus))
        log.info("wrote %d sequences to %s", len(corpus), p)
    text = "".join(f"{k}={v}\n" for k, v in manifest.items())
    data.atomic_write(Path(cfg.out) / "manifest.txt", text)
    return out

def _stop_after(args):
    return args.stop_after if args.stop_after else None

def cmd_pretrain(cfg: RunConfig, args) -> dict:
    corpus = _load_corpus(_corpus_path(cfg, "train"), "training corpus")
    path = _model_path(cfg, "gae")
    _, trace = fit_gae(cfg, corpus, path, cfg.resume, _stop_after(args))
    return {"final_loss": trace[-1], "epochs": float(len(trace))}

def cmd_train(cfg: RunConfig, args) -> dict:
    corpus = _load_corpus(_corpus_path(cfg, "train"), "training corpus")
    path = _model_path(cfg, "rgae")
    gae = None
    if not cfg.resume:
        gae_path = _model_path(cfg, "gae")
        if not gae_path.is_file():
            raise UsageError(f"missing pre-trained GAE {gae_path}: run 'pretrain' first or set gae_model")
        gae = _load_model(gae_path, "pre-trained GAE")
        if isinstance(gae, RgaeModel):
            gae = gae.gae
        if not isinstance(gae, GaeParams):
            raise UsageError(f"{gae_path} does not hold a GAE")
    _, trace = fit_rgae(cfg, corpus, gae, path, cfg.resume, _stop_after(args))
    return {"final_loss": trace[-1], "epochs": float(len(trace))}

def cmd_train_baseline(cfg: RunConfig, args) -> dict:
    corpus = _load_corpus(_corpus_path(cfg, "train"), "training corpus")
    _, trace = fit_baseline(cfg, corpus, _model_path(cfg, "baseline"), cfg.resume, _stop_after(args))
    return {"final_loss": trace[-1], "epochs": float(len(trace))}

def _report_path(cfg: RunConfig, command: str) -> Path:
    return cfg.path("report", f"{command}.report")

def _kfold_distributions(cfg: RunConfig, kinds, corpus):
    """Held-out distributions of per-fold models, in corpus order, per kind."""
    dists = {k: [None] * len(corpus) for k in kinds}
    params = {k: 0 for k in kinds}
    for f, (train_idx, idx) in enumerate(data.kfold_indices(len(corpus), cfg.kfold, cfg.seed)):
        train_s = [corpus[i] for i in train_idx]
        test_s = [corpus[i] for i in idx]
        for kind in kinds:
            log.info("fold %d/%d: training %s on %d sequences", f + 1, cfg.kfold, kind, len(train_s))
            model = fit_kind(cfg, kind, train_s)
            params[kind] = count_parameters(model)
            for i, d in zip(idx, predict_distributions(model, test_s)):
                dists[kind][i] = d
    return dists, params

def cmd_eval(cfg: RunConfig, args) -> dict:
    corpus = _load_corpus(_eval_corpus_path(cfg), "evaluation corpus")
    if cfg.kfold:
        dists, params = _kfold_distributions(cfg, [cfg.eval_model], corpus)
        dists, n_params = dists[cfg.eval_model], params[cfg.eval_model]
        kind = KFOLD_KINDS[cfg.eval_model]
    else:
        model = _load_model(_resolve_model_ref(cfg, cfg.eval_model), "model to evaluate")
        _check_alphabet(corpus, model.M, "evaluation corpus")
        dists, n_params, kind = predict_distributions(model, corpus), count_parameters(model), model.kind
    mean, per_seq = ce_from_distributions(dists, corpus)
    report = EvalReport(mean, per_seq, n_params, config_digest(cfg.as_dict()), kind).rounded()
    emit_report(report, _report_path(cfg, "eval"))
    return report.metrics()

def cmd_continue(cfg: RunConfig, args) -> dict:
    corpus = _load_corpus(_eval_corpus_path(cfg), "evaluation corpus")
    model = _load_model(_resolve_model_ref(cfg, cfg.eval_model), "model to evaluate")
    _check_alphabet(corpus, model.M, "evaluation corpus")
    try:
        prec_mean, pct, prec = evaluate_continuation(model, corpus, cfg.primer_length, cfg.flawless_threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    mean, per_seq = ce_from_distributions(predict_distributions(model, corpus), corpus)
    report = EvalReport(mean, per_seq, count_parameters(model), config_digest(cfg.as_dict()), model.kind,
                        precision_mean=prec_mean, pct_above_99=pct, per_sequence_precision=prec).rounded()
    emit_report(report, _report_path(cfg, "continue"))
    return report.metrics()

def cmd_ensemble(cfg: RunConfig, args) -> dict:
    members = list(cfg.ensemble_models)
    if len(members) < 2:
        raise UsageError("ensemble needs at least two members")
    corpus = _load_corpus(_eval_corpus_path(cfg), "evaluation corpus")
    if cfg.kfold:
        kinds = list(dict.fromkeys(members))
        by_kind, params = _kfold_distributions(cfg, kinds, corpus)
        member_dists = [by_kind[m] for m in members]
        n_params = sum(params[m] for m in members)
        names = [KFOLD_KINDS[m] for m in members]
    else:
        models = [_load_model(_resolve_model_ref(cfg, m), f"ensemble member {m!r}") for m in members]
        if len({m.M for m in models}) != 1:
            raise UsageError("ensemble members have different alphabet sizes: "
                             + ", ".join(f"{n}: M={m.M}" for n, m in zip(members, models)))
        _check_alphabet(corpus, models[0].M, "evaluation corpus")
        member_dists = [predict_distributions(m, corpus) for m in models]
        n_params = sum(count_parameters(m) for m in models)
        names = [m.kind if r in ("rgae", "baseline") else f"m{i}" for i, (r, m) in enumerate(zip(members, models))]
    ccfg = cfg.combine_config()
    combined = [combine([d[i] for d in member_dists], ccfg) for i in range(len(corpus))]
    mean, per_seq = ce_from_distributions(combined, corpus)
    extras = {}
    for i, (name, d) in enumerate(zip(names, member_dists)):
        key = f"member_ce_{name}" if names.count(name) == 1 else f"member_ce_{name}_{i}"
        extras[key.replace("-", "_")] = ce_from_distributions(d, corpus)[0]
    report = EvalReport(mean, per_seq, n_params, config_digest(cfg.as_dict()), "ensemble",
                        extras=extras).rounded()
    emit_report(report, _report_path(cfg, "ensemble"))
    return report.metrics()

HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
    "continue": cmd_continue,
    "ensemble": cmd_ensemble,
}

HELP = {
    "gen-data": "generate copy-and-shift (or scale-melody) corpora and a manifest",
    "pretrain": "pre-train the GAE on the training corpus",
    "train": "train the RGAE on top of a pre-trained GAE",
    "train-baseline": "train the windowed GRU baseline",
    "eval": "teacher-forced cross-entropy report (optionally k-fold)",
    "continue": "free-running continuation precision report",
    "ensemble": "entropy-weighted combination of two or more models",
}

# -- assertions -------------------------------------------------------------------

LOWER_IS_BETTER = ("mean_ce_bits", "final_loss")

def parse_assertion(text: str):
    """``metric>=x``, ``metric<=x`` or ``metric=x`` (cross-entropy and loss
    metrics mean ``<=``, everything else ``>=``)."""
    for op in (">=", "<="):
        if op in text:
            name, _, value = text.partition(op)
            break
    else:
        name, sep, value = text.partition("=")
        if not sep:
            raise UsageError(f"bad assertion {text!r}: expected metric=threshold")
        op = "<=" if name.strip() in LOWER_IS_BETTER or name.strip().startswith("member_ce") else ">="
    try:
        return name.strip(), op, float(value)
    except ValueError:
        raise UsageError(f"bad assertion threshold in {text!r}") from None

def check_assertions(assertions, metrics: dict) -> bool:
    ok = True
    for name, op, threshold in assertions:
        if name not in metrics:
            raise UsageError(f"unknown metric {name!r}; available: {', '.join(sorted(metrics))}")
        value = metrics[name]
        passed = value >= threshold if op == ">=" else value <= threshold
        print(f"assert {name} {op} {threshold:g}: {value:.6f} {'PASS' if passed else 'FAIL'}")
        ok &= passed
    return ok

# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (flat 'key = value' file, 'include = <preset or file>'; "
              f"presets: {', '.join(PRESETS)}):\n\n" + describe_keys())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--scale", type=float, default=1.0,
                        help="gen-data: multiply the per-cell (or melody) sequence counts")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--assert", dest="assertions", action="append", default=[], metavar="METRIC=THRESHOLD",
                        help="fail with exit code 1 unless the metric meets the threshold (repeatable)")
    common.add_argument("--stop-after", type=int, default=0, metavar="EPOCHS",
                        help="training: stop after this many epochs in total (the schedule still spans all epochs)")
    common.add_argument("-q", "--quiet", action="store_true", help="no per-epoch log lines")
    parser = argparse.ArgumentParser(
        prog="rgae", description="Recurrent gated autoencoder toolkit.", epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name], epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser

def load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    cfg = RunConfig.load(args.config, overrides)
    if args.scale <= 0:
        raise ConfigError("--scale must be positive")
    return cfg

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        assertions = [parse_assertion(a) for a in args.assertions]
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        metrics = HANDLERS[args.command](cfg, args)
        for k in sorted(metrics):
            print(f"{k}={metrics[k]:.6f}")
        return 0 if check_assertions(assertions, metrics) else 1
    except (ConfigError, UsageError, data.CorpusFormatError) as exc:
        print(f"rgae {args.command}: error: {exc}", file=sys.stderr)
        return 2

if __name__ == "__main__":
    sys.exit(main())
