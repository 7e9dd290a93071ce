"""Declarative experiment configuration (TOML).

Grammar: top-level keys ``seed`` and ``output_dir``; sections ``[schedule]``,
``[mixture]``, ``[model]``, ``[train]``, ``[loss]``, ``[sweep]``,
``[generate]``, ``[verify]`` and ``[ablation]``. Every section and key is
optional; unknown ones are rejected. See README for the key list.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from . import oracle
from .errors import ConfigError, DiffusionLabError
from .losses import ConsistencyConfig
from .model import ACTIVATIONS
from .proptest import SWEEP_MODES, SweepConfig
from .schedule import SCHEMES, NoiseSchedule
from .trainer import AblationConfig, AdamHyper, TrainConfig

OUTPUT_ROOT_ENV = "CDIFF_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    init_scale: float = 1.0


@dataclass(frozen=True)
class SweepSpec:
    mode: str = "fix-t-vary-tprime"
    n_grid: int = 16
    n_points: int = 256
    n_rollouts: int = 64
    steps_per_unit: float = 32.0
    min_steps: int = 4
    t_fixed: float = 1.0
    t_prime_fixed: float | None = None
    scheme: str = "uniform"

    def sweep_config(self) -> SweepConfig:
        return SweepConfig(self.n_points, self.n_rollouts, self.steps_per_unit, self.min_steps, self.t_fixed,
                           self.t_prime_fixed, self.scheme)


@dataclass(frozen=True)
class GenerateSpec:
    n: int = 1000
    sampler: str = "sde"
    n_steps: int = 128
    scheme: str = "uniform"


@dataclass(frozen=True)
class VerifySpec:
    n_points: int = 1000
    fd_h: float = 1e-3
    t_lo: float = 0.1
    n_bruteforce: int = 100
    n_martingale: int = 20
    n_rollouts: int = 10_000
    martingale_steps: int = 64


@dataclass(frozen=True)
class AblationSpec:
    seeds: tuple[int, ...] = (0, 1, 2)
    t_threshold: float = 0.2
    n_eval: int = 10_000
    n_projections: int = 64
    sample_steps: int = 64
    score_eval_n: int = 4096


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: NoiseSchedule = NoiseSchedule()
    mixture: oracle.GaussianMixture = field(default_factory=lambda: oracle.preset("grid4-2d"))
    mixture_name: str | None = "grid4-2d"
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    sweep: SweepSpec = SweepSpec()
    generate: GenerateSpec = GenerateSpec()
    verify: VerifySpec = VerifySpec()
    ablation: AblationSpec = AblationSpec()
    output_dir: Path = Path(DEFAULT_OUTPUT_ROOT) / "default"
    seed: int = 0

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=Path(output_dir))
        return cfg

    def ablation_config(self) -> AblationConfig:
        a = self.ablation
        return AblationConfig(self.model.widths, self.model.init_scale, a.t_threshold, a.n_eval, a.n_projections,
                              a.sample_steps, a.score_eval_n)

    def resolved(self) -> dict:
        """Every value in effect, defaults included."""
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "schedule": _plain(self.schedule.to_dict()),
            "mixture": {"preset": self.mixture_name, **self.mixture.to_dict()},
            "model": _plain(self.model.__dict__),
            "train": self.train.to_dict(),
            "sweep": _plain(self.sweep.__dict__),
            "generate": _plain(self.generate.__dict__),
            "verify": _plain(self.verify.__dict__),
            "ablation": _plain(self.ablation.__dict__),
        }


def _plain(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


# -------------------------------------------------------------- schema ----
# key -> (type tag, allowed values or None)
_SCHEMA: dict[str, dict[str, tuple[str, tuple | None]]] = {
    "": {"seed": ("int", None), "output_dir": ("str", None)},
    "schedule": {
        "kind": ("str", ("ve-linear", "ve-quadratic", "vp-exponential")),
        "sigma_max": ("float", None),
        "t_min": ("float", None),
        "vp_rate": ("float", None),
    },
    "mixture": {
        "preset": ("str", tuple(oracle.PRESETS)),
        "weights": ("float-list", None),
        "means": ("float-matrix", None),
        "variances": ("float-list", None),
    },
    "model": {"widths": ("int-list", None), "activation": ("str", ACTIVATIONS), "init_scale": ("float", None)},
    "train": {
        "steps": ("int", None),
        "batch_n": ("int", None),
        "lam": ("float", None),
        "lr": ("float", None),
        "beta1": ("float", None),
        "beta2": ("float", None),
        "eps": ("float", None),
        "t_threshold": ("float", None),
        "checkpoint_every": ("int", None),
        "log_every": ("int", None),
    },
    "loss": {
        "epsilon": ("float", None),
        "epsilon_rel": ("float", None),
        "n_steps": ("int", None),
        "n_mc": ("int", None),
        "estimator": ("str", ("full", "lazy")),
        "x_source": ("str", ("target-pt", "model")),
        "batch_n": ("int", None),
        "scheme": ("str", SCHEMES),
    },
    "sweep": {
        "mode": ("str", SWEEP_MODES),
        "n_grid": ("int", None),
        "n_points": ("int", None),
        "n_rollouts": ("int", None),
        "steps_per_unit": ("float", None),
        "min_steps": ("int", None),
        "t_fixed": ("float", None),
        "t_prime_fixed": ("float", None),
        "scheme": ("str", SCHEMES),
    },
    "generate": {
        "n": ("int", None),
        "sampler": ("str", ("sde", "ode")),
        "n_steps": ("int", None),
        "scheme": ("str", SCHEMES),
    },
    "verify": {k: ("float" if k in ("fd_h", "t_lo") else "int", None) for k in VerifySpec.__dataclass_fields__},
    "ablation": {
        "seeds": ("int-list", None),
        "t_threshold": ("float", None),
        "n_eval": ("int", None),
        "n_projections": ("int", None),
        "sample_steps": ("int", None),
        "score_eval_n": ("int", None),
    },
}


def _locate(text: str, section: str, key: str | None) -> int | None:
    """1-based line of ``[section]`` (key None) or of ``key = ...`` inside it."""
    current = ""
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return lineno
    return None


def _where(path: str, text: str, section: str, key: str | None) -> str:
    line = _locate(text, section, key)
    name = f"{section}.{key}" if section and key else (section or key or "")
    loc = f"{path}:{line}" if line else path
    return f"{loc}: field '{name}'"


def _check_value(value: Any, tag: str) -> bool:
    def is_num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    if tag == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if tag == "float":
        return is_num(value)
    if tag == "str":
        return isinstance(value, str)
    if tag == "int-list":
        return isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    if tag == "float-list":
        return isinstance(value, list) and all(is_num(v) for v in value)
    if tag == "float-matrix":
        return isinstance(value, list) and all(
            (isinstance(row, list) and all(is_num(v) for v in row)) or is_num(row) for row in value
        )
    raise AssertionError(tag)


def _validate(raw: dict, text: str, path: str) -> dict[str, dict]:
    out: dict[str, dict] = {s: {} for s in _SCHEMA}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _SCHEMA or key == "":
                raise ConfigError(f"{_where(path, text, key, None)}: unknown section [{key}]")
            section = key
            items = value.items()
        else:
            section = ""
            items = [(key, value)]
        for k, v in items:
            schema = _SCHEMA[section]
            if k not in schema:
                kind = "key" if section else "top-level key"
                raise ConfigError(f"{_where(path, text, section, k)}: unknown {kind} '{k}'")
            tag, allowed = schema[k]
            if isinstance(v, dict) or not _check_value(v, tag):
                raise ConfigError(f"{_where(path, text, section, k)}: expected {tag}, got {type(v).__name__}")
            if allowed is not None and v not in allowed:
                raise ConfigError(f"{_where(path, text, section, k)}: {v!r} is not one of {list(allowed)}")
            out[section][k] = v
    return out


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def _build(sec: dict[str, dict], text: str, path: str, stem: str) -> ExperimentConfig:
    def guarded(section, build):
        try:
            return build()
        except DiffusionLabError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{_where(path, text, section, None)}: {exc}") from None

    seed = sec[""].get("seed", 0)
    schedule = guarded("schedule", lambda: NoiseSchedule(**sec["schedule"]))

    m = sec["mixture"]
    if "preset" in m and len(m) > 1:
        raise ConfigError(f"{_where(path, text, 'mixture', None)}: give either 'preset' or explicit components")
    if m and "preset" not in m:
        missing = {"weights", "means", "variances"} - set(m)
        if missing:
            raise ConfigError(f"{_where(path, text, 'mixture', None)}: missing {sorted(missing)}")
        mixture = guarded("mixture", lambda: oracle.GaussianMixture(m["weights"], m["means"], m["variances"]))
        mixture_name = None
    else:
        mixture_name = m.get("preset", "grid4-2d")
        mixture = oracle.preset(mixture_name)

    model = ModelSpec(**{k: tuple(v) if k == "widths" else v for k, v in sec["model"].items()})
    if not model.widths or any(w < 1 for w in model.widths):
        raise ConfigError(f"{_where(path, text, 'model', 'widths')}: widths must be positive")

    loss = sec["loss"]
    consistency = guarded("loss", lambda: ConsistencyConfig(**loss))
    t = dict(sec["train"])
    adam = AdamHyper(**{k: t.pop(k) for k in ("lr", "beta1", "beta2", "eps") if k in t})
    train = guarded("train", lambda: TrainConfig(adam=adam, seed=seed, consistency=consistency, **t))

    sweep = SweepSpec(**sec["sweep"])
    if sweep.n_grid < 2 or sweep.n_rollouts < 2 or sweep.n_points < 2:
        raise ConfigError(f"{_where(path, text, 'sweep', None)}: n_grid, n_points and n_rollouts must be >= 2")
    generate = GenerateSpec(**sec["generate"])
    if generate.n < 1 or generate.n_steps < 1:
        raise ConfigError(f"{_where(path, text, 'generate', None)}: n and n_steps must be positive")
    verify = VerifySpec(**sec["verify"])
    ablation = AblationSpec(**{k: tuple(v) if k == "seeds" else v for k, v in sec["ablation"].items()})
    if not ablation.seeds:
        raise ConfigError(f"{_where(path, text, 'ablation', 'seeds')}: need at least one seed")

    out = sec[""].get("output_dir")
    output_dir = Path(out) if out is not None else _output_root() / stem
    return ExperimentConfig(schedule, mixture, mixture_name, model, train, sweep, generate, verify, ablation,
                            output_dir, seed)


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    """Parse TOML text into a validated ExperimentConfig or raise ConfigError with location."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    sec = _validate(raw, text, path)
    return _build(sec, text, path, Path(path).stem)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def config_fields() -> dict[str, list[str]]:
    """Accepted keys per section, for documentation and error messages."""
    return {s: sorted(keys) for s, keys in _SCHEMA.items()}


__all__ = ["ExperimentConfig", "parse_config", "load_config", "config_fields", "OUTPUT_ROOT_ENV"]
