"""INI experiment configuration.

One file, one section per stage::

    [run]      seed, out
    [data]     synthetic generator parameters
    [cvae]     architecture and training schedule
    [dlow]     objective weights, mapping network and schedule
    [eval]     K, K list, eps draws, tau_mm, beta list, vary-eps settings
    [control]  dataset and objective overrides for controllable prediction

Unknown sections or keys are configuration errors, so a typo never silently
falls back to a default.
"""

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .cvae import ACTIVATIONS, CvaeArch, CvaeTrainConfig
from .data import SyntheticSpec, validate_spec
from .dlow import DLowConfig
from .errors import ConfigError


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _optional(conv):
    def parse(text):
        t = text.strip().lower()
        return None if t in ("", "auto", "none") else conv(text)

    return parse


DATA_KEYS = {
    "num_modes": int,
    "items_per_mode": int,
    "H": int,
    "T": int,
    "V": int,
    "noise_scale": float,
    "num_prototypes": int,
    "mode_weights": _optional(_float_list),
    "lead_joint_modes": _optional(int),
    "mode_radius": float,
    "test_fraction": float,
    "frame_rate": float,
}

CVAE_KEYS = {
    "n_z": int,
    "hidden": int,
    "cell": str,
    "alpha": float,
    "activation": str,
    "epochs": int,
    "samples_per_epoch": int,
    "batch_size": int,
    "lr": float,
}

DLOW_KEYS = {
    "K": int,
    "beta": float,
    "lambda_d": float,
    "lambda_r": float,
    "lambda_s": float,
    "sigma_d": _optional(float),
    "J_s": _int_list,
    "J_d": _int_list,
    "identity_first": _bool,
    "a_mode": str,
    "hidden": int,
    "cell": str,
    "epochs": int,
    "samples_per_epoch": int,
    "batch_size": int,
    "lr": float,
}

EVAL_KEYS = {
    "k": int,
    "k_list": _int_list,
    "num_eval_eps": int,
    "tau_mm": _optional(float),
    "betas": _float_list,
    "num_eps": int,
    "context_index": int,
}

RUN_KEYS = {"seed": int, "out": str}


@dataclass
class EvalConfig:
    k: int = 50
    k_list: tuple = (1, 2, 5, 10, 20, 50)
    num_eval_eps: int = 1
    tau_mm: Optional[float] = None  # None: 3 noise scales per context coordinate
    betas: tuple = (1.0, 10.0, 100.0)
    num_eps: int = 8
    context_index: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    arch: dict = field(default_factory=lambda: {"n_z": 16, "hidden": 128, "cell": "mlp", "alpha": 1.0, "activation": "tanh"})
    cvae_train: CvaeTrainConfig = field(default_factory=CvaeTrainConfig)
    dlow: DLowConfig = field(default_factory=DLowConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    control_data: dict = field(default_factory=dict)
    control_dlow: dict = field(default_factory=dict)
    source: str = ""

    # -- derived pieces ----------------------------------------------------

    def data_spec(self, control: bool = False) -> SyntheticSpec:
        spec = replace(self.data, seed=self.seed)
        return replace(spec, **self.control_data) if control else spec

    def cvae_arch(self, control: bool = False) -> CvaeArch:
        spec = self.data_spec(control)
        return CvaeArch(H=spec.H, T=spec.T, V=spec.V, **self.arch)

    def dlow_config(self, control: bool = False, **overrides) -> DLowConfig:
        cfg = replace(self.dlow)
        if control:
            cfg = replace(cfg, **self.control_dlow)
        return replace(cfg, **overrides)

    def tau_mm(self, control: bool = False) -> float:
        if self.eval.tau_mm is not None:
            return self.eval.tau_mm
        spec = self.data_spec(control)
        return 3.0 * spec.noise_scale * math.sqrt(spec.H * spec.V)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def hash(self, *parts) -> str:
        """sha256 of the canonical JSON of the named parts (all when empty)."""
        d = self.to_dict()
        if parts:
            d = {p: d[p] for p in parts}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self):
        spec = self.data_spec()
        ctrl = self.data_spec(control=True)
        for s in (spec, ctrl):
            try:
                validate_spec(s)
            except ConfigError as exc:
                raise ConfigError(f"[data] {exc}") from None
        if self.arch.get("activation") not in ACTIVATIONS:
            raise ConfigError(f"[cvae] unknown activation {self.arch.get('activation')!r}")
        self.cvae_arch()
        self.dlow_config().validate(spec.V)
        self.dlow_config(control=True).validate(ctrl.V)
        ev = self.eval
        if ev.k < 1 or not ev.k_list or min(ev.k_list) < 1:
            raise ConfigError("[eval] K values must be positive")
        if ev.num_eval_eps < 1 or ev.num_eps < 1:
            raise ConfigError("[eval] draw counts must be positive")
        if ev.tau_mm is not None and ev.tau_mm < 0:
            raise ConfigError("[eval] tau_mm must be non-negative")
        if not ev.betas or min(ev.betas) < 0:
            raise ConfigError("[eval] betas must be a non-empty list of non-negative values")
        if min(self.cvae_train.epochs, self.dlow.epochs) < 1:
            raise ConfigError("epoch counts must be positive")
        return self


def _convert(section, key, text, table):
    try:
        return table[key](text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None


def _read_section(parser, name, table) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    # configparser lower-cases keys; map them back to the field names
    canon = {k.lower(): k for k in table}
    for raw_key, text in parser.items(name):
        key = canon.get(raw_key, raw_key)
        if key not in table:
            raise ConfigError(f"[{name}] unknown key {raw_key!r}")
        out[key] = _convert(name, key, text, table)
    return out


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None, k_list=None, betas=None) -> ExperimentConfig:
    """Parse an INI file; command-line values override the file."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        parser.read_string(text, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {"run", "data", "cvae", "dlow", "eval", "control"}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{path}: unknown section [{name}]")

    cfg = ExperimentConfig(source=str(path))
    run = _read_section(parser, "run", RUN_KEYS)
    cfg.seed = run.get("seed", cfg.seed)
    cfg.out = run.get("out", cfg.out)
    data = _read_section(parser, "data", DATA_KEYS)
    cfg.data = replace(cfg.data, **data)
    cv = _read_section(parser, "cvae", CVAE_KEYS)
    train_keys = {f.name for f in fields(CvaeTrainConfig)}
    cfg.cvae_train = replace(cfg.cvae_train, **{k: v for k, v in cv.items() if k in train_keys})
    cfg.arch.update({k: v for k, v in cv.items() if k not in train_keys})
    cfg.dlow = replace(cfg.dlow, **_read_section(parser, "dlow", DLOW_KEYS))
    cfg.eval = replace(cfg.eval, **_read_section(parser, "eval", EVAL_KEYS))
    control = _read_section(parser, "control", {**DATA_KEYS, **DLOW_KEYS})
    cfg.control_data = {k: v for k, v in control.items() if k in DATA_KEYS}
    cfg.control_dlow = {k: v for k, v in control.items() if k not in DATA_KEYS}

    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.out = str(out)
    if k_list is not None:
        cfg.eval = replace(cfg.eval, k_list=tuple(int(k) for k in k_list))
    if betas is not None:
        cfg.eval = replace(cfg.eval, betas=tuple(float(b) for b in betas))
    return cfg.validate()


def packaged_config(name: str = "benchmark") -> Path:
    """Path of a config file shipped with the package."""
    path = Path(__file__).parent / "configs" / f"{name}.ini"
    if not path.exists():
        raise ConfigError(f"no packaged config named {name!r}")
    return path
