"""Population trend bands, threshold crossing times and the subject bootstrap."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from .data import DataError, ScoreDataset, StandardizationParams, longitudinal_observations
from .lmm import GroupStats, LmmFit, ModelSpec, build_design, fit_stats, population_slope, predict_population_mean

log = logging.getLogger(__name__)

DEFAULT_HORIZON = 50.0


# ---------------------------------------------------------------------------
# trend bands


@dataclass(frozen=True)
class TrendBand:
    """Two-sided region holding ``coverage`` of subject trend lines around the mean.

    The spread at lapse ``t`` is the sd of ``b0 + b1 * t``; ``include_residual``
    widens it to individual scores by adding the residual variance.
    """

    fit: LmmFit
    coverage: float
    gender: int | None = None
    include_residual: bool = False

    def __post_init__(self):
        if not 0 < self.coverage < 1:
            raise ValueError(f"coverage must lie in (0, 1), got {self.coverage}")

    @property
    def z(self) -> float:
        return float(norm.ppf(0.5 + self.coverage / 2))

    def mean(self, t):
        return predict_population_mean(self.fit, t, self.gender)

    def half_width(self, t):
        return self.z * trend_sd(self.fit, t, self.include_residual)

    def sample(self, grid) -> dict[str, np.ndarray]:
        t = np.asarray(grid, dtype=float)
        if np.any(t < 0):
            raise ValueError("band grid must be non-negative")
        m = np.asarray(self.mean(t), dtype=float)
        h = np.asarray(self.half_width(t), dtype=float)
        return {"delta_t": t, "mean": m, "lower": m - h, "upper": m + h}


def trend_sd(fit: LmmFit, t, include_residual: bool = False):
    G = fit.ranef_cov
    t = np.asarray(t, dtype=float)
    var = G.var_intercept + 2 * G.cov * t + G.var_slope * t * t
    if include_residual:
        var = var + fit.residual_var
    # PSD G makes var >= 0 up to rounding
    out = np.sqrt(np.maximum(var, 0.0))
    return float(out) if out.ndim == 0 else out


def population_band(fit: LmmFit, coverage: float, grid, gender: int | None = None, include_residual: bool = False):
    """Sampled band ``{delta_t, mean, lower, upper}`` at each grid point."""
    return TrendBand(fit, coverage, gender, include_residual).sample(grid)


# ---------------------------------------------------------------------------
# crossing times


@dataclass(frozen=True)
class CrossingResult:
    threshold: float
    population_fraction: float
    crossing_time: float | None
    horizon: float
    below_at_enrollment: bool = False

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "population_fraction": self.population_fraction,
            "crossing_time": self.crossing_time,
            "horizon": self.horizon,
            "below_at_enrollment": self.below_at_enrollment,
        }


def lower_quantile(fit: LmmFit, t, population_fraction: float, gender=None, include_residual=False):
    """Trend value that ``population_fraction`` of subjects stay above at lapse ``t``."""
    z = norm.ppf(population_fraction)
    return predict_population_mean(fit, t, gender) - z * trend_sd(fit, t, include_residual)


def crossing_time(
    fit: LmmFit,
    threshold: float,
    population_fraction: float,
    horizon: float = DEFAULT_HORIZON,
    gender: int | None = None,
    include_residual: bool = False,
) -> CrossingResult:
    """Earliest lapse at which the lower ``population_fraction`` quantile reaches ``threshold``.

    The quantile curve is a line minus ``z`` times a norm of ``(1, t)``. For
    fractions of one half or more it is concave, so once at or below the
    threshold it stays there and bisection over the horizon finds the root.
    Below one half it is convex: its minimum on the horizon is located
    first and the root bracketed before it.
    """
    if not 0 < population_fraction < 1:
        raise ValueError("population_fraction must lie in (0, 1)")
    if not horizon > 0:
        raise ValueError("horizon must be positive")

    def gap(t):
        return lower_quantile(fit, t, population_fraction, gender, include_residual) - threshold

    result = dict(threshold=float(threshold), population_fraction=float(population_fraction), horizon=float(horizon))
    if gap(0.0) <= 0:
        return CrossingResult(crossing_time=0.0, below_at_enrollment=True, **result)
    hi = float(horizon)
    if population_fraction < 0.5:
        res = minimize_scalar(gap, bounds=(0.0, hi), method="bounded", options={"xatol": 1e-10 * hi})
        hi = min((res.x, hi), key=gap)
    if gap(hi) > 0:
        return CrossingResult(crossing_time=None, **result)
    lo = 0.0
    while hi - lo > 1e-12 * horizon:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    return CrossingResult(crossing_time=hi, **result)


def one_sd_time(fit_or_slope, gender: int | None = None) -> float:
    """Years for the mean standardized score to fall by one standard deviation."""
    slope = population_slope(fit_or_slope, gender) if isinstance(fit_or_slope, LmmFit) else float(fit_or_slope)
    if not slope < 0:
        raise ValueError(f"no decay to time: population slope is {slope}")
    return 1.0 / abs(slope)


def standardized_threshold(raw_threshold: float, params: StandardizationParams) -> float:
    return (raw_threshold - params.mean) / params.std_dev


# ---------------------------------------------------------------------------
# bootstrap


def param_names(model: ModelSpec) -> tuple[str, ...]:
    return model.fixed_names + ("var_intercept", "var_slope", "cov", "residual_var")


def _param_vector(fit: LmmFit) -> np.ndarray:
    G = fit.ranef_cov
    return np.concatenate([fit.fixed_effects, [G.var_intercept, G.var_slope, G.cov, fit.residual_var]])


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    model: ModelSpec
    names: tuple[str, ...]
    replicates: np.ndarray  # (B, n_params), replicate order
    converged: np.ndarray  # (B,)
    boundary: np.ndarray  # (B,)
    level: float
    master_seed: int
    restandardized: bool = False
    estimate: dict = field(default_factory=dict)

    @property
    def n_replicates(self) -> int:
        return len(self.replicates)

    @property
    def n_nonconverged(self) -> int:
        return int((~self.converged).sum())

    def _ok(self):
        return self.replicates[self.converged]

    @property
    def means(self) -> dict[str, float]:
        ok = self._ok()
        if not len(ok):
            return {n: math.nan for n in self.names}
        return dict(zip(self.names, map(float, ok.mean(axis=0))))

    @property
    def intervals(self) -> dict[str, tuple[float, float]]:
        ok = self._ok()
        if not len(ok):
            return {n: (math.nan, math.nan) for n in self.names}
        a = 100 * (1 - self.level) / 2
        lo, hi = np.percentile(ok, [a, 100 - a], axis=0)
        return {n: (float(l), float(h)) for n, l, h in zip(self.names, lo, hi)}

    def values(self, name: str) -> np.ndarray:
        return self.replicates[:, self.names.index(name)]

    def to_dict(self) -> dict:
        iv = self.intervals
        return {
            "model": self.model.kind,
            "n_replicates": self.n_replicates,
            "n_nonconverged": self.n_nonconverged,
            "n_boundary": int(self.boundary.sum()),
            "master_seed": self.master_seed,
            "level": self.level,
            "restandardized": self.restandardized,
            "estimate": self.estimate,
            "means": self.means,
            "intervals": {k: list(v) for k, v in iv.items()},
            "replicates": {n: self.values(n) for n in self.names},
            "converged": self.converged.tolist(),
        }


def _resample_stats(st: GroupStats, raw: GroupStats | None, idx) -> GroupStats:
    if raw is None:
        return st.take(idx)
    r = raw.take(idx)
    n = r.n.sum()
    total = r.Zty[:, 0].sum()
    mu = total / n
    sd = math.sqrt(max((r.yty.sum() - n * mu * mu) / (n - 1), 0.0))
    if not sd > 0:
        return r  # zero dispersion; fit on raw rather than divide by zero
    return r.affine(mu, sd)


def _replicate_chunk(args):
    st, raw, model, master_seed, indices, opts = args
    out = []
    m = st.n_subjects
    for b in indices:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(b,))))
        idx = rng.integers(0, m, size=m)
        fit = fit_stats(_resample_stats(st, raw, idx), model, **opts)
        out.append((b, _param_vector(fit), fit.converged, fit.boundary))
    return out


def bootstrap_observations(
    observations,
    model: ModelSpec | str,
    B: int,
    master_seed: int,
    interval_level: float = 0.95,
    restandardize: bool = False,
    n_jobs: int = 1,
    warm_start: bool = True,
    max_iter: int = 2000,
    tol: float = 1e-8,
) -> BootstrapResult:
    """Nonparametric bootstrap over subjects.

    Replicate ``b`` draws ``n_subjects`` subjects with replacement using the
    stream ``SeedSequence(master_seed, spawn_key=(b,))``; a subject drawn
    twice enters as two independent clusters. Every replicate is refit by
    ML, starting from the full-data optimum when ``warm_start`` is set.
    Replicates are gathered by index, so ``n_jobs`` never changes the result.

    With ``restandardize`` each replicate recomputes the score mean and sd
    from its own raw scores (observations must carry ``raw_score``).
    """
    model = model if isinstance(model, ModelSpec) else ModelSpec(model)
    if B < 1:
        raise ValueError("B must be at least 1")
    if not 0 < interval_level < 1:
        raise ValueError("interval_level must lie in (0, 1)")
    design = build_design(observations, model)
    if design.n_subjects < 2:
        raise DataError("bootstrap needs at least two subjects with longitudinal observations")
    st = GroupStats.from_design(design)
    raw = None
    if restandardize:
        raw_y = np.array([o.raw_score for o in sorted(observations, key=lambda o: o.subject_id)])
        if not np.all(np.isfinite(raw_y)):
            raise DataError("restandardizing needs raw scores on every observation")
        raw = GroupStats.from_design(
            type(design)(design.model, design.subject_ids, design.X, design.Z, raw_y, design.group)
        )
    full = fit_stats(st, model, max_iter=max_iter, tol=tol)
    opts = {"max_iter": max_iter, "tol": tol, "start": full.theta if warm_start else None}
    if n_jobs is None or n_jobs < 1:
        import os

        n_jobs = os.cpu_count() or 1
    chunks = [list(range(k, B, n_jobs)) for k in range(min(n_jobs, B))]
    tasks = [(st, raw, model, int(master_seed), c, opts) for c in chunks]
    if len(tasks) == 1:
        results = _replicate_chunk(tasks[0])
    else:
        with ProcessPoolExecutor(max_workers=len(tasks)) as ex:
            results = [r for part in ex.map(_replicate_chunk, tasks) for r in part]
    results.sort(key=lambda r: r[0])
    reps = np.array([r[1] for r in results])
    conv = np.array([r[2] for r in results], dtype=bool)
    bnd = np.array([r[3] for r in results], dtype=bool)
    if not conv.any():
        log.error("none of the %d bootstrap replicates converged", B)
    elif not conv.all():
        log.warning("%d of %d bootstrap replicates did not converge", int((~conv).sum()), B)
    return BootstrapResult(
        model=model,
        names=param_names(model),
        replicates=reps,
        converged=conv,
        boundary=bnd,
        level=float(interval_level),
        master_seed=int(master_seed),
        restandardized=restandardize,
        estimate=dict(zip(param_names(model), map(float, _param_vector(full)))),
    )


def bootstrap_fit(
    dataset: ScoreDataset,
    matcher_id: str,
    model: ModelSpec | str,
    B: int,
    master_seed: int,
    interval_level: float = 0.95,
    standardize_on: str | None = "enrollment_anchored",
    **kwargs,
) -> BootstrapResult:
    """Bootstrap the enrollment-anchored genuine scores of one matcher.

    The standardization is computed once on the full dataset unless
    ``restandardize=True`` is passed through ``kwargs``.
    """
    obs, _ = longitudinal_observations(dataset, matcher_id, standardize_on=standardize_on)
    return bootstrap_observations(obs, model, B, master_seed, interval_level, **kwargs)
