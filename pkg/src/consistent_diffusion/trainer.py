"""Optimization loop for DSM + consistency training and the masked-DSM ablation."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import oracle
from .errors import ArgumentError, DivergenceError
from .losses import ConsistencyConfig, combined_step
from .metrics import random_directions, sliced_wasserstein
from .model import BoundDenoiser, DenoiserNet, init
from .schedule import NoiseSchedule
from .sde import early_stopped, generate

log = logging.getLogger(__name__)

TRAINLOG_COLUMNS = ("step", "dsm", "consistency", "grad_norm", "wall_time")
TRAINLOG_VERSION = "trainlog-v1"


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamHyper) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam; returns new arrays and leaves the inputs untouched."""
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ArgumentError("theta, grad and optimizer state must have matching shapes")
    step = state.step + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grad * grad
    m_hat = m / (1 - hyper.beta1**step)
    v_hat = v / (1 - hyper.beta2**step)
    new_theta = theta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_theta, AdamState(m, v, step)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_n: int = 256
    lam: float = 0.1
    adam: AdamHyper = AdamHyper()
    seed: int = 0
    t_threshold: float | None = None
    consistency: ConsistencyConfig = ConsistencyConfig()
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ArgumentError("steps must be nonnegative")
        if self.batch_n < 1:
            raise ArgumentError("batch_n must be positive")
        if self.lam < 0:
            raise ArgumentError("lambda must be nonnegative")
        if not self.adam.lr > 0:
            raise ArgumentError("learning rate must be positive")
        if self.t_threshold is not None and not 0 <= self.t_threshold < 1:
            raise ArgumentError("t_threshold must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_n": self.batch_n,
            "lam": self.lam,
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps},
            "seed": self.seed,
            "t_threshold": self.t_threshold,
            "consistency": self.consistency.to_dict(),
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
            "t_sampling": "uniform",
        }


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ArgumentError("train log steps must increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, include_time: bool = False) -> str:
        """CSV text; wall time is blanked unless requested so reruns are byte-identical."""
        buf = io.StringIO()
        buf.write(f"# {TRAINLOG_VERSION}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAINLOG_COLUMNS)
        for r in self.records:
            wall = f"{r['wall_time']:.3f}" if include_time else ""
            writer.writerow([r["step"], repr(r["dsm"]), repr(r["consistency"]), repr(r["grad_norm"]), wall])
        return buf.getvalue()


def train(net: DenoiserNet, schedule: NoiseSchedule, mix: oracle.GaussianMixture, cfg: TrainConfig,
          rng: np.random.Generator | None = None, checkpoint_cb=None) -> tuple[DenoiserNet, TrainLog]:
    """Run cfg.steps Adam updates on DSM + lam * consistency; deterministic given the seed."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    net = net.copy()
    state = AdamState.zeros(net.n_params)
    tlog = TrainLog()
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        rep = combined_step(net, schedule, mix, cfg.consistency, cfg.lam, rng, cfg.batch_n, cfg.t_threshold)
        gnorm = float(np.linalg.norm(rep.grad))
        if not np.isfinite(gnorm) or not np.isfinite(rep.value):
            raise DivergenceError(
                f"non-finite gradient at step {step} (dsm={rep.parts['dsm']}, consistency={rep.parts['consistency']})",
                step=step,
            )
        net.theta, state = adam_step(net.theta, rep.grad, state, cfg.adam)
        if step % cfg.log_every == 0 or step == cfg.steps:
            tlog.append(step=step, dsm=rep.parts["dsm"], consistency=rep.parts["consistency"], grad_norm=gnorm,
                        wall_time=time.perf_counter() - start)
        if checkpoint_cb is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint_cb(step, net)
    return net, tlog


# ------------------------------------------------------------ ablation ----
@dataclass(frozen=True)
class AblationConfig:
    """Evaluation settings for the masked-DSM ablation."""

    widths: tuple[int, ...] = (64, 64)
    init_scale: float = 1.0
    t_threshold: float = 0.2
    n_eval: int = 10_000
    n_projections: int = 64
    sample_steps: int = 64
    score_eval_n: int = 4096

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


ARMS = ("dsm_only", "dsm_consistency", "masked_consistency", "masked_early_stop", "masked_control")


def score_mse(h, mix: oracle.GaussianMixture, schedule: NoiseSchedule, rng: np.random.Generator,
              n: int, t_lo: float, t_hi: float) -> float:
    """E[sigma_t^2 ||s_model - s*||^2] = E[||h_model - h*||^2 / sigma_t^2] for t ~ U[t_lo, t_hi], x ~ p_t."""
    t = rng.uniform(t_lo, t_hi, size=n)
    x = oracle.sample_pt(mix, schedule, rng, n, t)
    diff = h(x, t) - oracle.OracleDenoiser(mix, schedule)(x, t)
    return float(np.mean(np.sum(diff**2, axis=1) / schedule.sigma_squared(t)))


def ablation_run(schedule: NoiseSchedule, mix: oracle.GaussianMixture, base_cfg: TrainConfig,
                 rng: np.random.Generator | None = None, eval_cfg: AblationConfig = AblationConfig()) -> dict:
    """Train the DSM / consistency / masked-DSM arms and compare sample quality and score error.

    Quality is the sliced-Wasserstein distance of generated samples to fresh p0
    samples (lower is better). Every arm starts from the same initialization and
    shares the same generation noise. Generation starts from exact p_1 draws.
    """
    seed = base_cfg.seed
    rng = np.random.default_rng(seed) if rng is None else rng
    thr = eval_cfg.t_threshold
    proto = init(DenoiserNet(mix.dim, eval_cfg.widths), rng, eval_cfg.init_scale)
    lam = base_cfg.lam if base_cfg.lam > 0 else 0.1
    arm_cfgs = {
        "dsm_only": replace(base_cfg, lam=0.0, t_threshold=None),
        "dsm_consistency": replace(base_cfg, lam=lam, t_threshold=None),
        "masked_consistency": replace(base_cfg, lam=lam, t_threshold=thr),
        "masked_control": replace(base_cfg, lam=0.0, t_threshold=thr),
    }
    nets = {}
    for name, cfg in arm_cfgs.items():
        log.info("ablation seed %d: training %s", seed, name)
        nets[name], _ = train(proto, schedule, mix, cfg, np.random.default_rng([seed, ARMS.index(name)]))

    eval_seed = [seed, 1000]
    eval_rng = np.random.default_rng(eval_seed)
    x1 = oracle.sample_pt(mix, schedule, eval_rng, eval_cfg.n_eval, 1.0)
    reference = oracle.sample_p0(mix, eval_rng, eval_cfg.n_eval)
    dirs = random_directions(mix.dim, eval_cfg.n_projections, eval_rng)

    def quality(samples):
        return sliced_wasserstein(samples, reference, directions=dirs)

    arms = {}
    for name in ("dsm_only", "dsm_consistency", "masked_consistency", "masked_control"):
        h = BoundDenoiser(nets[name], schedule)
        out = generate(h, schedule, eval_cfg.n_eval, eval_cfg.sample_steps, np.random.default_rng([seed, 2000]),
                       x_init=x1)
        arms[name] = {
            "quality_sw": quality(out),
            "score_mse_masked": score_mse(h, mix, schedule, np.random.default_rng([seed, 3000]),
                                          eval_cfg.score_eval_n, schedule.t_min, thr),
        }
    h_c = BoundDenoiser(nets["masked_consistency"], schedule)
    stop_steps = max(1, int(round(eval_cfg.sample_steps * (1 - thr) / (1 - schedule.t_min))))
    out = early_stopped(h_c, schedule, x1, thr, stop_steps, np.random.default_rng([seed, 2000]))
    arms["masked_early_stop"] = {
        "quality_sw": quality(out),
        "score_mse_masked": arms["masked_consistency"]["score_mse_masked"],
    }
    return {
        "seed": seed,
        "t_threshold": thr,
        "train": base_cfg.to_dict(),
        "eval": eval_cfg.to_dict(),
        "arms": {k: arms[k] for k in ARMS},
    }
