"""Run configuration: a flat set of typed keys, read from ``key = value`` files
and overridable from the command line."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .estimators import EstimatorConfig
from .model import MASK_SCHEMES
from .nn import ContractViolation

DATA_DIR_ENV = "LATENT_DNF_DATA_DIR"
THREADS_ENV = "LATENT_DNF_THREADS"
DATA_SOURCES = ("synthetic", "mnist", "file")
# keys that say where or when to stop, not what is trained
HASH_EXCLUDED = ("out_dir", "max_steps", "checkpoint_every")


def parse_sizes(text):
    text = str(text).strip().lower()
    if text in ("", "none"):
        return None
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


@dataclass
class RunConfig:
    # model
    L: int = 1
    made_hidden: str = "512"
    posterior_hidden: str = "512"
    mask_scheme: str = "prefix"
    activation: str = "relu"
    beta_init: float = 0.1
    train_beta: bool = False
    # estimator
    estimator: str = "sfe-full"
    self_critic: str = "none"
    baseline: str = "none"
    gamma_kl: float = 1.0
    gamma_prefix: float = 0.0
    samples: int = 1
    ema_decay: float = 0.9
    var_floor: float = 1.0
    credit: str = "per_dim"
    entropy_factoring: bool = True
    ste_detach_inputs: bool = False
    # optimisation
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    max_steps: int = 0
    seed: int = 0
    # data
    data_source: str = "synthetic"
    data_path: str = ""
    downsample: int = 1
    binarize_seed: int = 0
    resample_binarization: bool = False
    train_limit: int = 0
    eval_limit: int = 0
    synthetic_D: int = 16
    synthetic_L: int = 1
    synthetic_n: int = 2000
    synthetic_eval_n: int = 500
    synthetic_seed: int = 0
    synthetic_hidden: str = "32"
    synthetic_scale: float = 2.0
    # evaluation
    eval_samples: int = 1000
    eval_greedy: bool = True
    eval_rows: int = 8192
    # output
    out_dir: str = "runs/default"
    checkpoint_every: int = 1
    runs: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def special_case(self):
        return self.estimator in ("sfe-special", "ste")

    def estimator_config(self):
        return EstimatorConfig(
            kind=self.estimator, self_critic=self.self_critic, baseline=self.baseline,
            gamma_kl=self.gamma_kl, gamma_prefix=self.gamma_prefix, samples=self.samples,
            ema_decay=self.ema_decay, var_floor=self.var_floor, credit=self.credit,
            entropy_factoring=self.entropy_factoring,
            ste_detach_inputs=self.ste_detach_inputs)

    def validate(self):
        if self.L < 0:
            raise ContractViolation("L must be >= 0")
        if self.mask_scheme not in MASK_SCHEMES:
            raise ContractViolation(f"unknown mask scheme {self.mask_scheme!r}")
        if self.mask_scheme != "prefix":
            raise ContractViolation("training needs the normalised 'prefix' mask scheme")
        if parse_sizes(self.made_hidden) is None:
            raise ContractViolation("made_hidden must list at least one layer size")
        if not self.special_case and parse_sizes(self.posterior_hidden) is None:
            raise ContractViolation("sfe-full needs posterior_hidden")
        if not 0.0 < self.beta_init < 1.0:
            raise ContractViolation("beta_init must lie in (0, 1)")
        if self.data_source not in DATA_SOURCES:
            raise ContractViolation(f"data_source must be one of {DATA_SOURCES}")
        for name in ("batch_size", "eval_samples", "eval_rows", "runs", "downsample"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        for name in ("epochs", "max_steps", "checkpoint_every", "train_limit", "eval_limit"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if not self.lr > 0:
            raise ContractViolation("lr must be positive")
        self.estimator_config()

    # -- serialisation ---------------------------------------------------------

    def to_text(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @property
    def hash(self):
        text = "".join(line for line in self.to_text().splitlines(keepends=True)
                       if line.split(" = ", 1)[0] not in HASH_EXCLUDED)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text, **overrides):
        values = parse_pairs(text)
        values.update(overrides)
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ContractViolation(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].type, raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides):
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _format(v):
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    if type_name == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractViolation(f"not a boolean: {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw.strip()


def parse_pairs(text):
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ContractViolation(f"line {lineno}: empty key")
        out[key] = value
    return out


def add_config_arguments(parser: argparse.ArgumentParser):
    """One ``--key`` flag per config key; unset flags stay None."""
    parser.add_argument("--config", help="key = value configuration file")
    group = parser.add_argument_group("configuration keys")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                           default=None, metavar=f.type.upper(),
                           help=f"default: {_format(f.default)}")


def config_from_args(args):
    values = {}
    if getattr(args, "config", None):
        values.update(parse_pairs(Path(args.config).read_text(encoding="utf-8")))
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    return RunConfig.from_dict(values)


def data_dir(default="data"):
    return os.environ.get(DATA_DIR_ENV, default)


def thread_count():
    raw = os.environ.get(THREADS_ENV)
    return int(raw) if raw else None
