"""Parameter recovery sweep: fit the BT model to many synthetic datasets.

Prints the median and 90th percentile relative error of every parameter,
plus convergence and boundary counts.

    python3 scripts/calibrate_recovery.py --subjects 1000 --seeds 10
"""

import argparse
import time
from dataclasses import dataclass, fields

import numpy as np

from longface.data import longitudinal_observations
from longface.lmm import fit_ml
from longface.synthgen import GeneratorSpec, MatcherSpec, ModelTruth, generate_longitudinal


@dataclass
class Config:
    subjects: int = 1000
    sessions: int = 5
    gap_low: float = 1.0
    gap_high: float = 3.0
    seeds: int = 10
    reml: bool = False


TRUTH = ModelTruth((0.5, -0.22), ((0.36, -0.03), (-0.03, 0.0225)), 0.25)
TRUE = {"gamma00": 0.5, "gamma10": -0.22, "var_intercept": 0.36, "var_slope": 0.0225, "cov": -0.03,
        "residual_var": 0.25}


def one(cfg: Config, seed: int):
    spec = GeneratorSpec(
        n_subjects=cfg.subjects,
        sessions_per_subject={cfg.sessions: 1.0},
        session_gap=(cfg.gap_low, cfg.gap_high),
        matchers=(MatcherSpec("M", TRUTH),),
        impostors=False,
        seed=seed,
    )
    ds, _ = generate_longitudinal(spec)
    obs, _ = longitudinal_observations(ds, "M", standardize_on=None)
    fit = fit_ml(obs, "BT", reml=cfg.reml)
    G = fit.ranef_cov
    est = {**fit.gamma, "var_intercept": G.var_intercept, "var_slope": G.var_slope, "cov": G.cov,
           "residual_var": fit.residual_var}
    return {k: abs(est[k] / v - 1) for k, v in TRUE.items()}, fit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(Config):
        if f.type is bool:
            p.add_argument(f"--{f.name.replace('_', '-')}", action="store_true")
        else:
            p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    cfg = Config(**vars(p.parse_args()))

    t0 = time.perf_counter()
    errs, n_conv, n_bnd = [], 0, 0
    for seed in range(cfg.seeds):
        rel, fit = one(cfg, seed)
        errs.append([rel[k] for k in TRUE])
        n_conv += fit.converged
        n_bnd += fit.boundary
    errs = np.array(errs)
    print(f"{cfg}")
    print(f"{'parameter':>14} {'p50':>8} {'p90':>8}")
    for k, col in zip(TRUE, errs.T):
        print(f"{k:>14} {np.median(col):8.3f} {np.percentile(col, 90):8.3f}")
    print(f"converged {n_conv}/{cfg.seeds}, boundary {n_bnd}, {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
