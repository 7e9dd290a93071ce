"""Batch front end: ``cdiff {train,generate,verify,sweep,ablate} CONFIG [options]``.

Exit codes: 0 success, 2 usage or config error, 3 numerical failure
(divergence, or a failed hard check in ``verify --target oracle``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model, oracle, proptest
from .config import ExperimentConfig, load_config
from .errors import ArgumentError, ConfigError, DivergenceError, DomainError, FormatError, UnsupportedKindError
from .proptest import SWEEP_MODES
from .sde import generate
from .trainer import ARMS, TrainConfig, ablation_run, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SAMPLES_VERSION = "samples-v1"
CHECKPOINT_NAME = "checkpoint.bin"

log = logging.getLogger("consistent_diffusion.cli")

# thresholds for the hard checks of ``verify --target oracle``
TOL_BRUTEFORCE = 1e-5
TOL_TWEEDIE = 1e-10
TOL_PDE = 1e-4
TOL_HEAT = 1e-5
TOL_SYMMETRY = 1e-8
MARTINGALE_Z = 3.0


# ------------------------------------------------------------ artifacts ---
def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_json(path: Path, payload) -> None:
    write_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_resolved(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    payload = {"command": command, **cfg.resolved()}
    if extra:
        payload["options"] = extra
    write_json(cfg.output_dir / "resolved-config.json", payload)


def samples_csv(samples: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write(f"# {SAMPLES_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i}" for i in range(samples.shape[1])])
    for row in samples:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _denoiser(cfg: ExperimentConfig, checkpoint: str | None, use_oracle: bool):
    if use_oracle:
        return oracle.OracleDenoiser(cfg.mixture, cfg.schedule), "oracle"
    path = Path(checkpoint) if checkpoint else cfg.output_dir / CHECKPOINT_NAME
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    return model.load(path, dim=cfg.mixture.dim).bind(cfg.schedule), str(path)


# ------------------------------------------------------------- commands ---
def cmd_train(cfg: ExperimentConfig) -> int:
    init_rng, train_rng = _seeds(cfg.seed, 2)
    net = model.init(model.DenoiserNet(cfg.mixture.dim, cfg.model.widths, cfg.model.activation), init_rng,
                     cfg.model.init_scale)
    write_resolved(cfg, "train")
    out = cfg.output_dir

    def on_checkpoint(step, current):
        model.save(current, out / f"checkpoint-{step:06d}.bin")

    net, tlog = train(net, cfg.schedule, cfg.mixture, cfg.train, train_rng, on_checkpoint)
    model.save(net, out / CHECKPOINT_NAME)
    write_atomic(out / "trainlog.csv", tlog.to_csv())
    if tlog.records:
        last = tlog.records[-1]
        print(f"trained {cfg.train.steps} steps: dsm={last['dsm']:.6g} consistency={last['consistency']:.6g}")
    print(f"wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_generate(cfg: ExperimentConfig, checkpoint: str | None, use_oracle: bool, n: int | None,
                 sampler: str | None) -> int:
    opts = cfg.generate
    n = opts.n if n is None else n
    sampler = opts.sampler if sampler is None else sampler
    if n < 1:
        raise ArgumentError("--n must be positive")
    h, source = _denoiser(cfg, checkpoint, use_oracle)
    write_resolved(cfg, "generate", {"n": n, "sampler": sampler, "denoiser": source})
    (rng,) = _seeds(cfg.seed, 1)
    samples = generate(h, cfg.schedule, n, opts.n_steps, rng, sampler=sampler, dim=cfg.mixture.dim,
                       scheme=opts.scheme)
    write_atomic(cfg.output_dir / "samples.csv", samples_csv(samples))
    print(f"wrote {n} samples to {cfg.output_dir / 'samples.csv'}")
    return EXIT_OK


def _check(name: str, value: float, limit: float, hard: bool) -> dict:
    return {"name": name, "value": float(value), "limit": limit, "passed": bool(value <= limit), "hard": hard}


def verify_suite(cfg: ExperimentConfig, h, target: str, rng: np.random.Generator) -> dict:
    """Residual checks of the denoiser ``h``; all hard when checking the oracle."""
    mix, sch, opts = cfg.mixture, cfg.schedule, cfg.verify
    hard = target == "oracle"
    checks = []
    t_hi = 1.0 - 2 * opts.fd_h
    x, t = proptest.drifted_points(mix, sch, rng, opts.n_points, opts.t_lo, t_hi)
    s_model = proptest.score_of(h, sch)

    if hard:
        xb, tb = proptest.drifted_points(mix, sch, rng, opts.n_bruteforce, opts.t_lo, 1.0)
        if mix.dim <= 2:
            brute = np.stack([oracle.posterior_bruteforce(mix, sch, xi, ti) for xi, ti in zip(xb, tb)])
            checks.append(_check("denoiser_vs_bruteforce", np.abs(h(xb, tb) - brute).max(), TOL_BRUTEFORCE, True))
        exact = lambda xx, tt: oracle.score_star(mix, sch, xx, tt)  # noqa: E731
        checks.append(_check("tweedie", proptest.tweedie_residual(h, exact, sch, x, t).max(), TOL_TWEEDIE, True))
        heat = proptest.heat_residual(mix, sch, x, t, opts.fd_h)
        checks.append(_check("heat_equation", np.abs(heat).max(), TOL_HEAT, True))

    pde = proptest.pde_residual(s_model, sch, x, t, opts.fd_h)
    checks.append(_check("score_pde", np.abs(pde).max(), TOL_PDE, hard))
    sym = proptest.conservativeness_check(h, sch, x, t)
    checks.append(_check("conservativeness_asymmetry", sym.max(), TOL_SYMMETRY, hard))

    zs = []
    worst = 0.0
    floor = proptest.resolution_floor(proptest.mixture_span(mix), opts.n_rollouts)
    for _ in range(opts.n_martingale):
        t_m = float(rng.uniform(0.2, 1.0))
        tp_m = float(rng.uniform(0.02, t_m - 0.05))
        xm, _ = proptest.drifted_points(mix, sch, rng, 1, t_m, t_m)
        value, se = proptest.martingale_violation(h, sch, xm[0], t_m, tp_m, opts.n_rollouts, opts.martingale_steps,
                                                  rng)
        excess = abs(value) - MARTINGALE_Z * se - floor
        worst = max(worst, excess)
        zs.append({"t": t_m, "t_prime": tp_m, "value": value, "std_error": se})
    martingale = _check("martingale_excess_over_3se", worst, 0.0, hard)
    martingale["configurations"] = zs
    martingale["resolution_floor"] = floor
    checks.append(martingale)
    return {
        "target": target,
        "n_points": opts.n_points,
        "fd_step": opts.fd_h,
        "checks": checks,
        "all_hard_passed": all(c["passed"] for c in checks if c["hard"]),
    }


def cmd_verify(cfg: ExperimentConfig, target: str, checkpoint: str | None) -> int:
    h, source = _denoiser(cfg, checkpoint, target == "oracle")
    write_resolved(cfg, "verify", {"target": target, "denoiser": source})
    (rng,) = _seeds(cfg.seed, 1)
    report = verify_suite(cfg, h, target, rng)
    write_json(cfg.output_dir / "residuals.json", report)
    for c in report["checks"]:
        status = "PASS" if c["passed"] else ("FAIL" if c["hard"] else "report")
        print(f"{status:6s} {c['name']}: {c['value']:.3e} (limit {c['limit']:.0e})")
    if target == "oracle" and not report["all_hard_passed"]:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, checkpoint: str | None, use_oracle: bool, mode: str | None) -> int:
    mode = cfg.sweep.mode if mode is None else mode
    if mode not in SWEEP_MODES:
        raise ArgumentError(f"unknown sweep mode {mode!r}; expected one of {SWEEP_MODES}")
    h, source = _denoiser(cfg, checkpoint, use_oracle)
    write_resolved(cfg, "sweep", {"mode": mode, "denoiser": source})
    (rng,) = _seeds(cfg.seed, 1)
    curve = proptest.consistency_sweep(h, cfg.schedule, cfg.mixture, mode, cfg.sweep.n_grid,
                                       cfg.sweep.sweep_config(), rng)
    write_atomic(cfg.output_dir / "sweep.csv", curve.to_csv())
    print(f"wrote {cfg.sweep.n_grid} sweep points to {cfg.output_dir / 'sweep.csv'}")
    return EXIT_OK


def ablation_summary(runs: list[dict]) -> dict:
    """Per-seed orderings of the ablation arms and how many seeds satisfy each."""
    rows = []
    for r in runs:
        a = r["arms"]
        rows.append({
            "seed": r["seed"],
            "early_stop_worse_than_full": a["masked_early_stop"]["quality_sw"] > a["masked_consistency"]["quality_sw"],
            "consistency_not_worse_than_dsm": a["dsm_consistency"]["quality_sw"] <= a["dsm_only"]["quality_sw"],
            "masked_score_mse_below_control":
                a["masked_consistency"]["score_mse_masked"] < a["masked_control"]["score_mse_masked"],
        })
    counts = {k: sum(row[k] for row in rows) for k in rows[0] if k != "seed"} if rows else {}
    return {"per_seed": rows, "counts": counts, "n_seeds": len(rows)}


def cmd_ablate(cfg: ExperimentConfig, seeds: list[int] | None) -> int:
    seeds = list(cfg.ablation.seeds) if seeds is None else seeds
    write_resolved(cfg, "ablate", {"seeds": seeds})
    runs = []
    for seed in seeds:
        base: TrainConfig = replace(cfg.train, seed=seed)
        runs.append(ablation_run(cfg.schedule, cfg.mixture, base, None, cfg.ablation_config()))
    summary = ablation_summary(runs)
    write_json(cfg.output_dir / "ablation.json", {"arms": list(ARMS), "runs": runs, "summary": summary})
    for key, count in summary["counts"].items():
        print(f"{key}: {count}/{len(seeds)} seeds")
    return EXIT_OK


# ----------------------------------------------------------------- main ---
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdiff", description="Consistent diffusion experiments on Gaussian mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")

    def denoiser_opts(p):
        p.add_argument("--checkpoint", help=f"model checkpoint (default: OUTPUT_DIR/{CHECKPOINT_NAME})")
        p.add_argument("--oracle", action="store_true", help="use the exact mixture denoiser instead of a model")

    common(sub.add_parser("train", help="train a denoiser"))
    p = sub.add_parser("generate", help="draw samples with a trained model")
    common(p)
    denoiser_opts(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--sampler", choices=("sde", "ode"))
    p = sub.add_parser("verify", help="run residual and martingale checks")
    common(p)
    p.add_argument("--target", choices=("oracle", "checkpoint"), default="oracle")
    p.add_argument("--checkpoint", help=f"checkpoint for --target checkpoint (default: OUTPUT_DIR/{CHECKPOINT_NAME})")
    p = sub.add_parser("sweep", help="consistency sweep over a time grid")
    common(p)
    denoiser_opts(p)
    p.add_argument("--mode", help=f"one of {', '.join(SWEEP_MODES)}")
    p = sub.add_parser("ablate", help="masked-DSM ablation over several seeds")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="override the ablation seeds")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "generate":
            return cmd_generate(cfg, args.checkpoint, args.oracle, args.n, args.sampler)
        if args.command == "verify":
            return cmd_verify(cfg, args.target, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.checkpoint, args.oracle, args.mode)
        return cmd_ablate(cfg, args.seeds)
    except (ConfigError, FormatError, ArgumentError, UnsupportedKindError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
