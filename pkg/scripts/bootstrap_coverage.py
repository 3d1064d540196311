"""Coverage of subject-bootstrap percentile intervals for the population slope.

Each dataset is drawn from a known BT model, bootstrapped, and checked for
whether the interval holds the true slope.

    python3 scripts/bootstrap_coverage.py --datasets 200 --replicates 200
"""

import argparse
import os
import time
from dataclasses import dataclass, fields

from longface.data import longitudinal_observations
from longface.longitudinal import bootstrap_observations
from longface.synthgen import GeneratorSpec, MatcherSpec, ModelTruth, generate_longitudinal


@dataclass
class Config:
    datasets: int = 200
    replicates: int = 200
    subjects: int = 120
    level: float = 0.95
    first_seed: int = 10_000
    jobs: int = os.cpu_count() or 1


TRUTH = ModelTruth((0.5, -0.22), ((0.36, -0.03), (-0.03, 0.0225)), 0.25)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(Config):
        p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    cfg = Config(**vars(p.parse_args()))

    t0 = time.perf_counter()
    covered, widths = 0, []
    for d in range(cfg.datasets):
        spec = GeneratorSpec(
            n_subjects=cfg.subjects,
            sessions_per_subject={3: 0.3, 4: 0.4, 5: 0.3},
            matchers=(MatcherSpec("M", TRUTH),),
            impostors=False,
            seed=cfg.first_seed + d,
        )
        ds, _ = generate_longitudinal(spec)
        obs, _ = longitudinal_observations(ds, "M", standardize_on=None)
        res = bootstrap_observations(obs, "BT", cfg.replicates, master_seed=d, interval_level=cfg.level,
                                     n_jobs=cfg.jobs)
        lo, hi = res.intervals["gamma10"]
        covered += lo <= TRUTH.gamma[1] <= hi
        widths.append(hi - lo)
        if (d + 1) % 20 == 0:
            print(f"{d + 1:4d} datasets  coverage {covered / (d + 1):.3f}  {time.perf_counter() - t0:.0f}s", flush=True)
    print(f"{cfg}")
    print(f"coverage {covered / cfg.datasets:.3f}, mean width {sum(widths) / len(widths):.4f}, "
          f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
