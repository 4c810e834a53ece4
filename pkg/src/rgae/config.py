"""Flat ``key = value`` run configuration.

A config file is UTF-8 text with one ``key = value`` pair per line; ``#``
starts a comment.  ``include = <preset name or path>`` pulls in another file
first; later lines override earlier ones, and command-line flags override the
file.  Relative paths in an ``include`` are resolved against the including
file.  Every key is declared in :data:`KEYS`; anything else is an error.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

from .data import STANDARD_SCHEMES, SchemeDatasetSpec, parse_schemes
from .ensemble import WeightedCombineConfig
from .gae import GaePretrainConfig
from .recurrent import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    vals = tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    if not vals:
        raise ValueError("empty list")
    return vals


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable
    default: str
    help: str
    section: str


_SECTIONS = [
    ("general", [
        ("seed", int, "0", "global seed; every random stream is derived from it"),
        ("out", str, "run", "output directory for corpora, models, traces and reports"),
    ]),
    ("data", [
        ("dataset", str, "schemes", "gen-data corpus kind: 'schemes' (copy-and-shift) or 'scale-melodies'"),
        ("M", int, "64", "pitch alphabet size"),
        ("schemes", str, "standard", "transposition schemes: 'standard' or a scheme file (one comma-separated scheme per line)"),
        ("fragment_lengths", _int_list, "4,8,16", "fragment lengths used by the scheme generator"),
        ("fragment_source", str, "random-walk", "'random-walk' or a monophonic corpus file to draw fragments from"),
        ("n_train", int, "20", "training sequences per (scheme, fragment length) cell"),
        ("n_test", int, "5", "test sequences per cell"),
        ("n_valid", int, "1", "validation sequences per cell"),
        ("sequence_length", int, "512", "frames per generated sequence"),
        ("melody_count", int, "100", "number of scale melodies (dataset=scale-melodies)"),
        ("melody_length", int, "64", "frames per scale melody"),
        ("melody_max_step", int, "2", "largest scale-degree step of a scale melody"),
        ("train_corpus", str, "", "training corpus file (default <out>/train.txt)"),
        ("test_corpus", str, "", "test corpus file (default <out>/test.txt)"),
        ("valid_corpus", str, "", "validation corpus file (default <out>/valid.txt)"),
    ]),
    ("gae", [
        ("gae_context", int, "16", "context window n in frames"),
        ("gae_factors", int, "512", "factor units F"),
        ("gae_mappings", int, "64", "mapping units K"),
        ("gae_init_gain", float, "3.0", "multiplier on the Glorot-uniform init range"),
        ("gae_epochs", int, "50", "pre-training epochs"),
        ("gae_learning_rate", float, "0.005", "initial RMSProp rate, decayed linearly to 0"),
        ("gae_batch_size", int, "64", "pairs per pre-training batch"),
        ("gae_dropout", float, "0.0", "input dropout rate on the context window"),
        ("gae_delta_max", int, "30", "shift distance drawn from [-max, max] per batch"),
        ("gae_sparsity_target", float, "0.05", "target mean activation of each mapping unit"),
        ("gae_sparsity_weight", float, "0.001", "weight of the mapping sparsity penalty"),
        ("gae_norm_weight", float, "0.001", "weight of the column-norm deviation penalty on Q and V"),
        ("gae_norm_cap", float, "10.0", "maximum column norm of Q and V"),
        ("gae_augment", _bool, "false", "randomly transpose each pre-training batch"),
    ]),
    ("rgae", [
        ("hidden", int, "64", "recurrent units of the RGAE"),
        ("epochs", int, "50", "RGAE training epochs"),
        ("finetune_epochs", int, "0", "final epochs in which the GAE is trained as well"),
        ("learning_rate", float, "0.001", "initial RMSProp rate of the RGAE"),
        ("dropout", float, "0.0", "input dropout rate of the RGAE"),
        ("batch_size", int, "8", "sequences per batch (RGAE and baseline)"),
        ("grad_clip_norm", float, "5.0", "global gradient-norm clip (0 disables)"),
        ("augment", _bool, "true", "randomly transpose each training batch (RGAE and baseline)"),
        ("augment_max", int, "30", "transposition drawn from [-max, max]"),
    ]),
    ("baseline", [
        ("rnn_hidden", int, "512", "recurrent units of the baseline"),
        ("rnn_window", int, "16", "frames fed to the baseline at each step"),
        ("rnn_epochs", int, "60", "baseline training epochs"),
        ("rnn_learning_rate", float, "0.001", "initial RMSProp rate of the baseline"),
        ("rnn_dropout", float, "0.0", "input dropout rate of the baseline"),
    ]),
    ("models", [
        ("gae_model", str, "", "pre-trained GAE file (default <out>/gae.bin)"),
        ("model", str, "", "RGAE model file (default <out>/rgae.bin)"),
        ("baseline_model", str, "", "baseline model file (default <out>/baseline.bin)"),
        ("resume", _bool, "false", "continue training from the checkpoint next to the model file"),
    ]),
    ("evaluation", [
        ("eval_model", str, "rgae", "model to evaluate: 'rgae', 'baseline' or a model file"),
        ("eval_data", str, "test", "evaluation corpus: 'train', 'test', 'valid' or a corpus file"),
        ("kfold", int, "0", "k > 1 trains fresh per-fold models on the evaluation corpus (eval, ensemble)"),
        ("primer_length", int, "64", "primer frames before free-running continuation"),
        ("flawless_threshold", float, "0.99", "precision above which a continuation counts as flawless"),
        ("ensemble_models", _str_list, "rgae,baseline", "comma-separated members: 'rgae', 'baseline' or model files"),
        ("ensemble_bias", float, "0.5", "entropy bias exponent b of the weighted combination"),
        ("entropy_floor", float, "1e-6", "lower clamp of the relative entropy"),
        ("report", str, "", "report file (default <out>/<command>.report)"),
    ]),
]

KEYS: dict[str, Key] = {
    name: Key(name, parse, default, help_, section)
    for section, entries in _SECTIONS
    for name, parse, default, help_ in entries
}

PRESETS = ("exp1-rgae", "exp1-baseline", "exp1-desk", "exp2-rgae", "exp2-baseline", "exp2-desk")


def preset_path(name: str):
    return resources.files("rgae") / "presets" / f"{name}.cfg"


def _read_lines(source) -> list[tuple[int, str]]:
    return list(enumerate(source.read_text(encoding="utf-8").splitlines(), start=1))


def read_config_file(ref: str, base: Path | None = None, _seen=None) -> dict[str, str]:
    """Raw ``key -> text`` pairs of a config file or preset, includes expanded."""
    _seen = set() if _seen is None else _seen
    if ref in PRESETS:
        source, label = preset_path(ref), f"preset {ref}"
    else:
        p = Path(ref)
        if base is not None and not p.is_absolute():
            p = base / p
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        source, label = p, str(p)
    key = str(source)
    if key in _seen:
        raise ConfigError(f"include cycle at {label}")
    _seen.add(key)
    out: dict[str, str] = {}
    here = Path(str(source)).parent if isinstance(source, Path) else None
    for lineno, line in _read_lines(source):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        k, v = k.strip(), v.strip()
        if not sep or not k:
            raise ConfigError(f"{label}:{lineno}: expected 'key = value'")
        if k == "include":
            out.update(read_config_file(v, here, _seen))
        elif k not in KEYS:
            raise ConfigError(f"{label}:{lineno}: unknown config key {k!r}")
        else:
            out[k] = v
    return out


class RunConfig:
    """Validated configuration; values are available as attributes."""

    def __init__(self, raw: dict[str, str] | None = None):
        raw = dict(raw or {})
        for k in raw:
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
        self.raw = {k: raw.get(k, KEYS[k].default) for k in KEYS}
        self.values = {}
        for k, text in self.raw.items():
            try:
                self.values[k] = KEYS[k].parse(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from None
        self._validate()

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def load(cls, path: str | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        raw = read_config_file(path) if path else {}
        raw.update(overrides or {})
        return cls(raw)

    def _validate(self):
        v = self.values
        if v["dataset"] not in ("schemes", "scale-melodies"):
            raise ConfigError("dataset must be 'schemes' or 'scale-melodies'")
        for k in ("M", "gae_context", "gae_factors", "gae_mappings", "hidden", "rnn_hidden", "rnn_window",
                  "sequence_length", "melody_length", "gae_batch_size", "batch_size"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be positive")
        for k in ("gae_epochs", "epochs", "rnn_epochs"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be at least 1")
        for k in ("n_train", "n_test", "n_valid", "melody_count", "finetune_epochs", "kfold", "primer_length"):
            if v[k] < 0:
                raise ConfigError(f"{k} must not be negative")
        if v["finetune_epochs"] > v["epochs"]:
            raise ConfigError("finetune_epochs must not exceed epochs")
        for k in ("gae_dropout", "dropout", "rnn_dropout"):
            if not 0.0 <= v[k] < 1.0:
                raise ConfigError(f"{k} must lie in [0, 1)")
        for k in ("gae_learning_rate", "learning_rate", "rnn_learning_rate", "entropy_floor"):
            if v[k] <= 0:
                raise ConfigError(f"{k} must be positive")
        if v["ensemble_bias"] < 0:
            raise ConfigError("ensemble_bias must not be negative")
        if v["kfold"] == 1:
            raise ConfigError("kfold must be 0 (off) or at least 2")

    def as_dict(self) -> dict[str, str]:
        return dict(self.raw)

    # -- component configs -------------------------------------------------

    def path(self, key: str, default_name: str) -> Path:
        text = self.values[key]
        return Path(text) if text else Path(self.out) / default_name

    def scheme_list(self):
        if self.schemes == "standard":
            return STANDARD_SCHEMES
        p = Path(self.schemes)
        if not p.is_file():
            raise ConfigError(f"scheme file not found: {p}")
        return parse_schemes(p.read_text(encoding="utf-8"))

    def dataset_spec(self, scale: float = 1.0) -> SchemeDatasetSpec:
        return SchemeDatasetSpec(
            schemes=tuple(self.scheme_list()),
            fragment_lengths=self.fragment_lengths,
            n_train=scaled_count(self.n_train, scale),
            n_test=scaled_count(self.n_test, scale),
            n_eval=scaled_count(self.n_valid, scale),
            sequence_length=self.sequence_length,
            M=self.M,
            seed=self.seed,
        )

    def gae_config(self) -> GaePretrainConfig:
        d = self.gae_delta_max
        a = self.augment_max
        return GaePretrainConfig(
            epochs=self.gae_epochs,
            delta_range=(-d, d),
            dropout_rate=self.gae_dropout,
            sparsity_target=self.gae_sparsity_target,
            sparsity_weight=self.gae_sparsity_weight,
            norm_deviation_weight=self.gae_norm_weight,
            norm_cap=self.gae_norm_cap,
            learning_rate=self.gae_learning_rate,
            batch_size=self.gae_batch_size,
            augment_transpose=self.gae_augment,
            augment_range=(-a, a),
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        a = self.augment_max
        return TrainConfig(
            epochs=self.epochs,
            finetune_epochs=self.finetune_epochs,
            learning_rate=self.learning_rate,
            dropout_rate=self.dropout,
            grad_clip_norm=self.grad_clip_norm,
            batch_size=self.batch_size,
            augment_transpose=self.augment,
            augment_range=(-a, a),
            seed=self.seed,
        )

    def baseline_config(self) -> TrainConfig:
        a = self.augment_max
        return TrainConfig(
            epochs=self.rnn_epochs,
            learning_rate=self.rnn_learning_rate,
            dropout_rate=self.rnn_dropout,
            grad_clip_norm=self.grad_clip_norm,
            batch_size=self.batch_size,
            augment_transpose=self.augment,
            augment_range=(-a, a),
            seed=self.seed,
        )

    def combine_config(self) -> WeightedCombineConfig:
        return WeightedCombineConfig(bias=self.ensemble_bias, entropy_floor=self.entropy_floor)


def scaled_count(n: int, scale: float) -> int:
    """``round(n * scale)``, but never below 1 unless ``n`` itself is 0."""
    if n == 0:
        return 0
    return max(1, int(round(n * scale)))


def describe_keys() -> str:
    """Help text listing every config key with its default."""
    lines = []
    for section, entries in _SECTIONS:
        lines.append(f"[{section}]")
        for name, _, default, help_ in entries:
            lines.append(f"  {name} = {default or '(unset)'}")
            lines.append(f"      {help_}")
    return "\n".join(lines)
