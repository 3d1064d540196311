"""Two-level linear mixed-effects models with a random intercept and slope.

Level 1 is ``Y_ij = pi_0i + pi_1i * dT_ij + e_ij``; level 2 expands each
subject's intercept and slope into population fixed effects plus Gaussian
random effects ``(b_0i, b_1i) ~ N(0, G)``. Two covariate sets are supported:

* ``BT`` -- time lapse only: fixed columns ``[1, dT]``.
* ``CGender`` -- time lapse and gender: fixed columns
  ``[1, gender, dT, gender * dT]``.

Fitting minimises the ML deviance (optionally REML). The fixed effects and
the residual variance are profiled out in closed form, which leaves three
free parameters: the lower-triangular factor ``L`` of ``G / sigma_e^2``.
Every per-subject quantity reduces to 2x2 algebra on sufficient statistics
(``Z'Z``, ``Z'X``, ``Z'y``, ...), so one deviance evaluation is O(subjects)
vectorised numpy, and bootstrap replicates only re-index those statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .data import BOY, DataError, LongitudinalObservation

log = logging.getLogger(__name__)

FIXED_NAMES = {
    "BT": ("gamma00", "gamma10"),
    "CGender": ("gamma00", "gamma01", "gamma10", "gamma11"),
}
_ALIASES = {"bt": "BT", "b_t": "BT", "cgender": "CGender", "gender": "CGender", "c_gender": "CGender"}

# lme4 reports a singular fit when a Cholesky diagonal falls below this
BOUNDARY_TOL = 1e-4


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "BT"

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower(), self.kind)
        if kind not in FIXED_NAMES:
            raise ValueError(f"unknown model kind {self.kind!r}; expected BT or CGender")
        object.__setattr__(self, "kind", kind)

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return FIXED_NAMES[self.kind]

    @property
    def uses_gender(self) -> bool:
        return self.kind == "CGender"


@dataclass(frozen=True)
class DesignRow:
    subject_id: str
    fixed: tuple[float, ...]
    random: tuple[float, float]
    response: float


@dataclass(frozen=True)
class RandomEffectsCovariance:
    var_intercept: float
    var_slope: float
    cov: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.var_intercept, self.cov], [self.cov, self.var_slope]])

    @classmethod
    def from_matrix(cls, G) -> "RandomEffectsCovariance":
        G = np.asarray(G, dtype=float)
        return cls(float(G[0, 0]), float(G[1, 1]), float(G[0, 1]))

    @property
    def correlation(self) -> float:
        d = math.sqrt(self.var_intercept * self.var_slope)
        return self.cov / d if d > 0 else 0.0

    def is_psd(self, rtol: float = 1e-12) -> bool:
        v0, v1, c = self.var_intercept, self.var_slope, self.cov
        return v0 >= 0 and v1 >= 0 and c * c <= v0 * v1 * (1 + rtol) + 1e-300


@dataclass(frozen=True)
class LmmFit:
    model: ModelSpec
    fixed_effects: np.ndarray
    ranef_cov: RandomEffectsCovariance
    residual_var: float
    deviance: float
    n_subjects: int
    n_observations: int
    converged: bool
    boundary: bool
    theta: np.ndarray = field(repr=False, default=None)
    n_evals: int = 0
    reml: bool = False

    @property
    def gamma(self) -> dict[str, float]:
        return dict(zip(self.model.fixed_names, map(float, self.fixed_effects)))

    @property
    def intercept(self) -> float:
        return self.gamma["gamma00"]

    @property
    def slope(self) -> float:
        return self.gamma["gamma10"]

    def to_dict(self) -> dict:
        G = self.ranef_cov
        return {
            "model": self.model.kind,
            "method": "REML" if self.reml else "ML",
            "gamma": self.gamma,
            "ranef_cov": {"var_intercept": G.var_intercept, "var_slope": G.var_slope, "cov": G.cov},
            "residual_var": self.residual_var,
            "deviance": self.deviance,
            "converged": self.converged,
            "boundary": self.boundary,
            "n_subjects": self.n_subjects,
            "n_obs": self.n_observations,
            "theta": [float(t) for t in self.theta] if self.theta is not None else None,
            "n_evals": self.n_evals,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmmFit":
        model = ModelSpec(d["model"])
        rc = d["ranef_cov"]
        theta = d.get("theta")
        return cls(
            model=model,
            fixed_effects=np.array([d["gamma"][k] for k in model.fixed_names], dtype=float),
            ranef_cov=RandomEffectsCovariance(rc["var_intercept"], rc["var_slope"], rc["cov"]),
            residual_var=d["residual_var"],
            deviance=d["deviance"],
            n_subjects=d["n_subjects"],
            n_observations=d["n_obs"],
            converged=d["converged"],
            boundary=d["boundary"],
            theta=np.asarray(theta, dtype=float) if theta is not None else None,
            n_evals=d.get("n_evals", 0),
            reml=d.get("method") == "REML",
        )


# ---------------------------------------------------------------------------
# design


@dataclass(frozen=True, eq=False)
class Design:
    """Model matrices with rows grouped by subject (subjects in sorted id order)."""

    model: ModelSpec
    subject_ids: tuple[str, ...]
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    group: np.ndarray

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def rows(self) -> list[DesignRow]:
        return [
            DesignRow(self.subject_ids[g], tuple(map(float, x)), (float(z[0]), float(z[1])), float(y))
            for g, x, z, y in zip(self.group, self.X, self.Z, self.y)
        ]

    def blocks(self):
        """Yield ``(subject_id, X_i, Z_i, y_i)``."""
        bounds = np.flatnonzero(np.diff(self.group)) + 1
        for sl in np.split(np.arange(len(self.y)), bounds):
            if len(sl):
                yield self.subject_ids[self.group[sl[0]]], self.X[sl], self.Z[sl], self.y[sl]


def build_design(observations: Sequence[LongitudinalObservation], model: ModelSpec | str = "BT") -> Design:
    model = model if isinstance(model, ModelSpec) else ModelSpec(model)
    if not observations:
        raise DataError("no observations to model")
    obs = sorted(observations, key=lambda o: o.subject_id)
    ids = sorted({o.subject_id for o in obs})
    gidx = {s: k for k, s in enumerate(ids)}
    dt = np.array([o.delta_t for o in obs], dtype=float)
    y = np.array([o.y_standardized for o in obs], dtype=float)
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(dt)):
        raise DataError("non-finite response or time lapse")
    if np.any(dt <= 0):
        raise DataError("every observation needs a positive time lapse")
    one = np.ones_like(dt)
    if model.uses_gender:
        if any(o.gender is None for o in obs):
            missing = next(o.subject_id for o in obs if o.gender is None)
            raise DataError(f"CGender model needs gender; subject {missing!r} has none")
        g = np.array([1.0 if o.gender == BOY else 0.0 for o in obs])
        X = np.column_stack([one, g, dt, g * dt])
    else:
        X = np.column_stack([one, dt])
    Z = np.column_stack([one, dt])
    group = np.array([gidx[o.subject_id] for o in obs], dtype=np.int64)
    return Design(model, tuple(ids), X, Z, y, group)


# ---------------------------------------------------------------------------
# likelihood


def neg2_log_likelihood(design: Design, fixed_effects, ranef_cov, residual_var: float) -> float:
    """-2 log marginal likelihood at given (beta, G, sigma_e^2).

    Each subject contributes ``n_i log 2pi + log|V_i| + r_i' V_i^-1 r_i`` with
    ``V_i = Z_i G Z_i' + sigma_e^2 I``. Uses the push-through identities, so a
    singular ``G`` is fine.
    """
    G = ranef_cov.matrix if isinstance(ranef_cov, RandomEffectsCovariance) else np.asarray(ranef_cov, float)
    if not RandomEffectsCovariance.from_matrix(G).is_psd(rtol=1e-9):
        raise ValueError("random-effects covariance is not positive semidefinite")
    s2 = float(residual_var)
    if not s2 > 0:
        raise ValueError("residual variance must be positive")
    beta = np.asarray(fixed_effects, dtype=float)
    r = design.y - design.X @ beta
    m = design.n_subjects
    g = design.group
    Z = design.Z
    S = np.zeros((m, 2, 2))
    np.add.at(S, g, Z[:, :, None] * Z[:, None, :])
    u = np.zeros((m, 2))
    np.add.at(u, g, Z * r[:, None])
    rr = np.bincount(g, weights=r * r, minlength=m)
    n = np.bincount(g, minlength=m)
    # A = I + S G / s2 ; log|V_i| = n_i log s2 + log|A|
    A = np.eye(2) + S @ G / s2
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    if np.any(det <= 1e-300) or not np.all(np.isfinite(det)):
        raise FloatingPointError("numerically singular marginal covariance")
    Ainv = np.linalg.inv(A)
    # r' V^-1 r = (r'r - u' G A^-1 u / s2) / s2
    Gu = u @ G.T
    q = (rr - np.einsum("mi,mij,mj->m", Gu, Ainv, u) / s2) / s2
    total = n * math.log(2 * math.pi) + n * math.log(s2) + np.log(det) + q
    return float(total.sum())


@dataclass(frozen=True, eq=False)
class GroupStats:
    """Per-subject sufficient statistics of a design; rows index subjects."""

    S: np.ndarray  # Z'Z      (m, 2, 2)
    ZtX: np.ndarray  # Z'X    (m, 2, p)
    Zty: np.ndarray  # Z'y    (m, 2)
    XtX: np.ndarray  # X'X    (m, p, p)
    Xty: np.ndarray  # X'y    (m, p)
    yty: np.ndarray  # y'y    (m,)
    n: np.ndarray  # rows     (m,)

    @classmethod
    def from_design(cls, d: Design) -> "GroupStats":
        m, p = d.n_subjects, d.X.shape[1]
        g = d.group
        X, Z, y = d.X, d.Z, d.y

        def acc(vals, shape):
            out = np.zeros((m,) + shape)
            np.add.at(out, g, vals)
            return out

        return cls(
            S=acc(Z[:, :, None] * Z[:, None, :], (2, 2)),
            ZtX=acc(Z[:, :, None] * X[:, None, :], (2, p)),
            Zty=acc(Z * y[:, None], (2,)),
            XtX=acc(X[:, :, None] * X[:, None, :], (p, p)),
            Xty=acc(X * y[:, None], (p,)),
            yty=np.bincount(g, weights=y * y, minlength=m),
            n=np.bincount(g, minlength=m).astype(float),
        )

    def take(self, idx) -> "GroupStats":
        idx = np.asarray(idx)
        return GroupStats(*(getattr(self, f)[idx] for f in ("S", "ZtX", "Zty", "XtX", "Xty", "yty", "n")))

    def affine(self, shift: float, scale: float) -> "GroupStats":
        """Statistics of the response ``(y - shift) / scale``.

        Relies on the first column of both ``X`` and ``Z`` being the intercept.
        """
        one_y = self.Zty[:, 0]
        return GroupStats(
            S=self.S,
            ZtX=self.ZtX,
            Zty=(self.Zty - shift * self.S[:, :, 0]) / scale,
            XtX=self.XtX,
            Xty=(self.Xty - shift * self.XtX[:, :, 0]) / scale,
            yty=(self.yty - 2 * shift * one_y + self.n * shift * shift) / (scale * scale),
            n=self.n,
        )

    @property
    def n_subjects(self) -> int:
        return len(self.n)


class _Profiled:
    """Profiled deviance as a function of the 3-vector ``theta = (l00, l10, l11)``.

    With ``L = [[a, 0], [b, c]]`` and ``M_i = I + L' S_i L`` the three
    quadratic forms ``X'V*^-1 X``, ``X'V*^-1 y`` and ``y'V*^-1 y`` are the raw
    cross-products minus ``sum_i w_i . K_i``, where ``w_i`` holds the distinct
    entries of ``W_i = L M_i^-1 L'`` and ``K_i`` the matching products of
    ``Z_i'X_i`` and ``Z_i'y_i``. One matmul per evaluation.
    """

    def __init__(self, st: GroupStats, reml: bool = False):
        self.reml = reml
        self.nobs = float(st.n.sum())
        p = self.p = st.XtX.shape[1]
        self.m = st.n_subjects
        self.s00, self.s01, self.s11 = st.S[:, 0, 0], st.S[:, 0, 1], st.S[:, 1, 1]
        A0, A1 = st.ZtX[:, 0, :], st.ZtX[:, 1, :]
        u0, u1 = st.Zty[:, 0], st.Zty[:, 1]

        def block(v, w):
            # products of (Z'X | Z'y) rows, flattened: p*p + p + 1 columns
            return np.concatenate(
                [(v[0][:, :, None] * w[0][:, None, :]).reshape(self.m, p * p), v[0] * w[1][:, None], (v[1] * w[1])[:, None]],
                axis=1,
            )

        k00 = block((A0, u0), (A0, u0))
        k01 = block((A0, u0), (A1, u1)) + block((A1, u1), (A0, u0))
        k11 = block((A1, u1), (A1, u1))
        self.K = np.stack([k00, k01, k11], axis=1).reshape(3 * self.m, -1)
        self.raw = np.concatenate([st.XtX.sum(0).ravel(), st.Xty.sum(0), [st.yty.sum()]])
        self.rss_floor = 1e-12 * max(float(st.yty.sum()), 1e-300)
        self.evals = 0

    def solve(self, theta):
        """Return ``(deviance, beta, sigma2)`` at ``theta``."""
        self.evals += 1
        a, b, c = float(theta[0]), float(theta[1]), float(theta[2])
        s00, s01, s11 = self.s00, self.s01, self.s11
        m00 = 1.0 + a * a * s00 + 2 * a * b * s01 + b * b * s11
        m01 = c * (a * s01 + b * s11)
        m11 = 1.0 + c * c * s11
        det = m00 * m11 - m01 * m01
        i00, i01, i11 = m11 / det, -m01 / det, m00 / det
        t = b * i00 + c * i01
        w = np.empty((self.m, 3))
        w[:, 0] = a * a * i00
        w[:, 1] = a * t
        w[:, 2] = b * t + c * (b * i01 + c * i11)
        q = self.raw - w.ravel() @ self.K
        p = self.p
        XVX = q[: p * p].reshape(p, p)
        XVy = q[p * p : p * p + p]
        yVy = q[-1]
        if p == 2:
            d = XVX[0, 0] * XVX[1, 1] - XVX[0, 1] * XVX[1, 0]
            if not d > 0 or not XVX[0, 0] > 0:
                return math.inf, None, math.nan
            beta = np.array([XVX[1, 1] * XVy[0] - XVX[0, 1] * XVy[1], XVX[0, 0] * XVy[1] - XVX[1, 0] * XVy[0]]) / d
            logdet_x = math.log(d)
        else:
            try:
                cf = np.linalg.cholesky(XVX)
            except np.linalg.LinAlgError:
                return math.inf, None, math.nan
            beta = np.linalg.solve(XVX, XVy)
            logdet_x = 2 * float(np.log(np.diag(cf)).sum())
        rss = max(yVy - beta @ XVy, self.rss_floor)
        logdet = float(np.log(det).sum())
        if self.reml:
            dof = self.nobs - p
            s2 = rss / dof
            dev = logdet + logdet_x + dof * (1 + math.log(2 * math.pi * s2))
        else:
            s2 = rss / self.nobs
            dev = logdet + self.nobs * (1 + math.log(2 * math.pi * s2))
        return dev, beta, s2

    def __call__(self, theta):
        return self.solve(theta)[0]


DEFAULT_START = np.array([0.5, 0.0, 0.5])
# coarse screening grid for extra starts: the profiled surface can hold
# separate local minima on either sign of the intercept-slope correlation
_GRID = np.array(
    [(a, b, c) for a in (0.1, 0.3, 1.0, 3.0) for b in (-3.0, -1.0, -0.3, 0.3, 1.0, 3.0) for c in (0.05, 0.3, 1.0, 3.0)]
)


def _default_starts(f, per_side: int = 2) -> list[np.ndarray]:
    """``0.5 * I`` plus the best screening-grid points for each correlation sign."""
    dev = np.array([f(g) for g in _GRID])
    starts = [DEFAULT_START]
    for side in (_GRID[:, 1] < 0, _GRID[:, 1] > 0):
        idx = np.flatnonzero(side)
        for k in idx[np.argsort(dev[idx], kind="stable")[:per_side]]:
            if np.isfinite(dev[k]):
                starts.append(_GRID[k])
    return starts
_BOUNDS = [(0.0, None), (None, None), (0.0, None)]


def _simplex(x, rel: float = 0.1, floor: float = 0.05) -> np.ndarray:
    # scipy's default steps are tiny at zero, which strands a start on the boundary
    step = np.maximum(rel * np.abs(x), floor)
    return np.vstack([x, x + np.diag(step)])


def _descend(f, x, budget: int, tol: float, max_restarts: int):
    """Bounded Nelder-Mead from ``x``, restarted until a fresh simplex stops helping."""
    x = np.array(x, dtype=float)
    x[0], x[2] = abs(x[0]), abs(x[2])
    best = f(x)
    converged = False
    for _ in range(max_restarts):
        if budget <= 0:
            break
        res = minimize(
            f,
            x,
            method="Nelder-Mead",
            bounds=_BOUNDS,
            options={
                "maxiter": budget,
                "maxfev": 2 * budget,
                "xatol": 1e-7,
                "fatol": tol * max(1.0, abs(best)) * 1e-2,
                "initial_simplex": _simplex(x),
            },
        )
        budget -= res.nit
        improved = best - res.fun
        if res.fun <= best:
            x, prev, best = res.x, best, res.fun
        else:
            prev = best
        if res.status == 0 and abs(improved) <= tol * max(1.0, abs(prev)):
            converged = True
            break
    return x, best, converged


def fit_stats(
    st: GroupStats,
    model: ModelSpec,
    max_iter: int = 2000,
    tol: float = 1e-8,
    start=None,
    reml: bool = False,
    max_restarts: int = 8,
) -> LmmFit:
    """Fit from precomputed sufficient statistics (see :func:`fit_ml`)."""
    if st.n.sum() < 1:
        raise DataError("cannot fit a model to zero observations")
    f = _Profiled(st, reml=reml)
    starts = _default_starts(f) if start is None else (start,)
    x, best, converged = None, math.inf, False
    for x0 in starts:
        xs, fs, cs = _descend(f, x0, max_iter, tol, max_restarts)
        # ties keep the earlier start, so the choice is deterministic
        if x is None or fs < best - tol * max(1.0, abs(best)):
            x, best, converged = xs, fs, cs
    dev, beta, s2 = f.solve(x)
    L = np.array([[x[0], 0.0], [x[1], x[2]]])
    G = s2 * (L @ L.T)
    return LmmFit(
        model=model,
        fixed_effects=np.asarray(beta, dtype=float),
        ranef_cov=RandomEffectsCovariance.from_matrix(G),
        residual_var=float(s2),
        deviance=float(dev),
        n_subjects=st.n_subjects,
        n_observations=int(st.n.sum()),
        converged=converged and math.isfinite(dev),
        boundary=bool(min(x[0], x[2]) < BOUNDARY_TOL),
        theta=np.asarray(x, dtype=float),
        n_evals=f.evals,
        reml=reml,
    )


def fit_ml(
    observations,
    model: ModelSpec | str = "BT",
    max_iter: int = 2000,
    tol: float = 1e-8,
    start=None,
    reml: bool = False,
) -> LmmFit:
    """Maximum-likelihood fit of a random intercept/slope model.

    Parameters
    ----------
    observations : sequence of LongitudinalObservation, or Design
    model : ModelSpec or {"BT", "CGender"}
    max_iter : int
        Nelder-Mead iteration budget per start, shared across its restarts.
    tol : float
        Relative deviance change below which a restart counts as converged.
    start : array-like of 3, optional
        Starting Cholesky factor ``(l00, l10, l11)`` of ``G / sigma_e^2``.
        By default the fit runs from ``0.5 * I`` and from the best two points
        of a coarse screening grid on each side of the intercept-slope
        correlation, keeping the lowest deviance; an explicit start is used
        alone (the bootstrap's warm start, where the full search is too slow).
    reml : bool
        Minimise the REML criterion instead of the ML deviance.

    Returns
    -------
    LmmFit
        ``converged`` is False when the budget ran out; the best point found
        is still returned. ``boundary`` flags a singular covariance.
    """
    model = model if isinstance(model, ModelSpec) else ModelSpec(model)
    design = observations if isinstance(observations, Design) else build_design(observations, model)
    if design.model != model:
        raise ValueError(f"design was built for {design.model.kind}, not {model.kind}")
    fit = fit_stats(GroupStats.from_design(design), model, max_iter=max_iter, tol=tol, start=start, reml=reml)
    if not fit.converged:
        log.warning("mixed model did not converge within %d iterations", max_iter)
    if fit.boundary:
        log.info("singular fit: a random-effect variance is at its lower bound")
    return fit


def profiled_deviance(design: Design, theta, reml: bool = False) -> float:
    return _Profiled(GroupStats.from_design(design), reml=reml)(np.asarray(theta, dtype=float))


def predict_population_mean(fit: LmmFit, delta_t, gender: int | None = None):
    """Fixed-effects prediction at time lapse ``delta_t`` (scalar or array)."""
    g = fit.gamma
    t = np.asarray(delta_t, dtype=float)
    if fit.model.uses_gender:
        if gender is None:
            raise ValueError("CGender predictions need a gender")
        b = 1.0 if gender == BOY else 0.0
        out = g["gamma00"] + g["gamma01"] * b + (g["gamma10"] + g["gamma11"] * b) * t
    else:
        out = g["gamma00"] + g["gamma10"] * t
    return float(out) if np.ndim(out) == 0 else out


def population_slope(fit: LmmFit, gender: int | None = None) -> float:
    g = fit.gamma
    if fit.model.uses_gender:
        if gender is None:
            raise ValueError("CGender slopes need a gender")
        return g["gamma10"] + (g["gamma11"] if gender == BOY else 0.0)
    return g["gamma10"]
