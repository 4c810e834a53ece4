import numpy as np
import pytest

from rgae import cli
from rgae.config import KEYS, PRESETS, ConfigError, RunConfig, read_config_file, scaled_count
from rgae.data import FrameSequence, read_corpus, write_corpus
from rgae.evaluate import ReplayModel, evaluate_continuation, read_report
from rgae.serialize import save_model

from conftest import random_baseline, random_rgae

TINY = """
M = 16
n_train = 1
n_test = 1
n_valid = 0
sequence_length = 48
gae_context = 4
gae_factors = 8
gae_mappings = 4
gae_epochs = 2
gae_delta_max = 6
hidden = 4
epochs = 3
augment_max = 4
rnn_hidden = 6
rnn_window = 2
rnn_epochs = 2
primer_length = 20
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY + f"out = {tmp_path / 'run'}\n")
    return cfg


def run(cfg, *args):
    return cli.main([args[0], "--config", str(cfg), "-q", *args[1:]])


# -- config -----------------------------------------------------------------------

def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["eval", "--help"])
    text = capsys.readouterr().out
    missing = [k for k in KEYS if f"  {k} = " not in text]
    assert not missing


def test_defaults_parse_and_validate():
    cfg = RunConfig()
    assert cfg.M == 64 and cfg.fragment_lengths == (4, 8, 16) and cfg.augment is True
    with pytest.raises(ConfigError):
        RunConfig({"finetune_epochs": "60", "epochs": "50"})
    with pytest.raises(ConfigError):
        RunConfig({"hidden": "many"})
    with pytest.raises(ConfigError):
        RunConfig({"kfold": "1"})


def test_unknown_key_rejected_before_any_work(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(f"out = {tmp_path / 'run'}\nlearning_rat = 0.1\n")
    assert run(bad, "gen-data") == 2
    assert "learning_rat" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()
    assert cli.main(["gen-data", "-q", "--set", "bogus=1", "--out", str(tmp_path / "r2")]) == 2
    assert not (tmp_path / "r2").exists()


def test_include_relative_and_override(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "base.cfg").write_text("hidden = 7\nseed = 3\n")
    (tmp_path / "sub" / "top.cfg").write_text("include = base.cfg\nseed = 4  # later wins\n")
    assert read_config_file(str(tmp_path / "sub" / "top.cfg")) == {"hidden": "7", "seed": "4"}
    (tmp_path / "a.cfg").write_text("include = b.cfg\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        read_config_file(str(tmp_path / "a.cfg"))


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load(name):
    cfg = RunConfig.load(name)
    assert cfg.as_dict()["seed"] == "0"


def test_exp2_preset_sizes():
    cfg = RunConfig.load("exp2-rgae")
    spec = cfg.dataset_spec()
    cells = len(spec.schemes) * len(spec.fragment_lengths)
    assert (cells * spec.n_train, cells * spec.n_test, cells * spec.n_eval) == (600, 150, 30)
    assert (cfg.gae_context, cfg.gae_factors, cfg.gae_mappings, cfg.hidden) == (16, 512, 64, 64)
    base = RunConfig.load("exp2-baseline")
    assert (base.rnn_hidden, base.rnn_window, base.eval_model) == (512, 16, "baseline")
    exp1 = RunConfig.load("exp1-rgae")
    assert (exp1.M, exp1.gae_context, exp1.hidden, exp1.kfold) == (128, 8, 16, 10)


def test_scaled_count():
    assert scaled_count(20, 0.1) == 2 and scaled_count(20, 0.01) == 1 and scaled_count(0, 5) == 0


# -- gen-data -----------------------------------------------------------------------

def test_gen_data_deterministic_and_scaled(tiny, tmp_path):
    assert run(tiny, "gen-data") == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "run").iterdir()}
    assert run(tiny, "gen-data") == 0
    assert {p.name: p.read_bytes() for p in (tmp_path / "run").iterdir()} == first
    assert len(read_corpus(tmp_path / "run" / "train.txt")) == 30
    assert b"train_sha256=" in first["manifest.txt"]

    assert run(tiny, "gen-data", "--scale", "3", "--out", str(tmp_path / "big")) == 0
    assert len(read_corpus(tmp_path / "big" / "train.txt")) == 90
    assert run(tiny, "gen-data", "--seed", "9", "--out", str(tmp_path / "other")) == 0
    assert (tmp_path / "other" / "train.txt").read_bytes() != first["train.txt"]


def test_gen_data_scale_melodies(tiny, tmp_path):
    assert run(tiny, "gen-data", "--set", "dataset=scale-melodies", "--set", "melody_count=12",
               "--set", "melody_length=20") == 0
    corpus = read_corpus(tmp_path / "run" / "train.txt")
    assert len(corpus) == 12 and {len(s) for s in corpus} == {20}


# -- training pipeline ---------------------------------------------------------------

def test_train_without_gae_is_usage_error(tiny, capsys):
    assert run(tiny, "gen-data") == 0
    assert run(tiny, "train") == 2
    assert "pretrain" in capsys.readouterr().err


def test_missing_corpus_is_usage_error(tiny):
    assert run(tiny, "pretrain") == 2


def test_pipeline_reproducible_and_resumable(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(tiny, "gen-data") == 0
    assert run(tiny, "pretrain") == 0
    assert run(tiny, "train") == 0
    assert run(tiny, "eval") == 0
    model, report = (out / "rgae.bin").read_bytes(), (out / "eval.report").read_text()
    trace = (out / "rgae.trace").read_text()
    assert len(trace.splitlines()) == 3

    # an identical rerun reproduces the model and report byte for byte
    assert run(tiny, "train") == 0 and run(tiny, "eval") == 0
    assert (out / "rgae.bin").read_bytes() == model and (out / "eval.report").read_text() == report

    # interrupted after one epoch, then resumed: same bytes as the uninterrupted run
    assert run(tiny, "train", "--stop-after", "1") == 0
    assert len((out / "rgae.trace").read_text().splitlines()) == 1
    assert (out / "rgae.bin").read_bytes() != model
    assert run(tiny, "train", "--set", "resume=true") == 0
    assert (out / "rgae.bin").read_bytes() == model
    assert (out / "rgae.trace").read_text() == trace

    rep = read_report(out / "eval.report")
    assert rep.model_kind == "rgae" and len(rep.per_sequence_ce) == 30
    capsys.readouterr()
    assert run(tiny, "eval", "--assert", "mean_ce_bits=0.001") == 1
    assert "FAIL" in capsys.readouterr().out
    assert run(tiny, "eval", "--assert", f"mean_ce_bits<={rep.mean_ce_bits + 1}") == 0
    assert run(tiny, "eval", "--assert", "no_such_metric=1") == 2


def test_baseline_continue_and_ensemble(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(tiny, "gen-data") == 0
    assert run(tiny, "train-baseline") == 0
    assert run(tiny, "continue", "--set", "eval_model=baseline") == 0
    rep = read_report(out / "continue.report")
    assert rep.model_kind == "rnn" and 0.0 <= rep.precision_mean <= 1.0

    # an ensemble of a model with itself is that model
    assert run(tiny, "eval", "--set", "eval_model=baseline") == 0
    solo = read_report(out / "eval.report").mean_ce_bits
    assert run(tiny, "ensemble", "--set", "ensemble_models=baseline,baseline") == 0
    ens = read_report(out / "ensemble.report")
    assert ens.mean_ce_bits == pytest.approx(solo, abs=1e-5)
    assert set(ens.extras) == {"member_ce_rnn_0", "member_ce_rnn_1"}
    assert run(tiny, "ensemble", "--set", "ensemble_models=baseline") == 2


def test_ensemble_alphabet_mismatch(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(tiny, "gen-data") == 0
    save_model(out / "a.bin", random_baseline(M=16).astype(np.float32))
    save_model(out / "b.bin", random_rgae(M=8).astype(np.float32))
    models = f"ensemble_models={out / 'a.bin'},{out / 'b.bin'}"
    assert run(tiny, "ensemble", "--set", models) == 2
    assert "alphabet" in capsys.readouterr().err


def test_eval_alphabet_mismatch(tiny, tmp_path):
    out = tmp_path / "run"
    assert run(tiny, "gen-data") == 0
    save_model(out / "m.bin", random_rgae(M=8).astype(np.float32))
    assert run(tiny, "eval", "--set", f"eval_model={out / 'm.bin'}") == 2


def test_kfold_eval_trains_per_fold(tiny, tmp_path):
    out = tmp_path / "run"
    assert run(tiny, "gen-data", "--set", "dataset=scale-melodies", "--set", "melody_count=6",
               "--set", "melody_length=24") == 0
    assert run(tiny, "eval", "--set", "kfold=3", "--set", "eval_data=train", "--set", "eval_model=baseline") == 0
    rep = read_report(out / "eval.report")
    assert len(rep.per_sequence_ce) == 6 and rep.model_kind == "rnn"


def test_replay_model_continuation_is_flawless(tmp_path):
    corpus = read_corpus_like(tmp_path)
    prec, pct, _ = evaluate_continuation(ReplayModel(corpus), corpus, primer_len=8)
    assert prec == 1.0 and pct == 100.0


def read_corpus_like(tmp_path):
    rng = np.random.default_rng(0)
    corpus = [FrameSequence.from_pitches(rng.integers(0, 16, 30), 16) for _ in range(4)]
    write_corpus(tmp_path / "c.txt", corpus, 16)
    return read_corpus(tmp_path / "c.txt")
