"""Unweighted sum-rule fusion of two matchers after per-matcher normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, MatcherScores, ScoreDataset, _pair_key

NORMALIZATIONS = ("zscore_pooled", "minmax_pooled", "identity")
_SHORT = {"zscore": "zscore_pooled", "minmax": "minmax_pooled"}


@dataclass(frozen=True)
class FusionSpec:
    matcher_a: str
    matcher_b: str
    normalization: str = "zscore_pooled"
    output_label: str | None = None

    def __post_init__(self):
        norm = _SHORT.get(self.normalization, self.normalization)
        if norm not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}; expected one of {NORMALIZATIONS}")
        object.__setattr__(self, "normalization", norm)
        if self.matcher_a == self.matcher_b:
            raise ValueError("fusion needs two different matchers")
        if self.output_label is None:
            object.__setattr__(self, "output_label", f"fused({self.matcher_a}+{self.matcher_b})")


@dataclass(frozen=True)
class Normalization:
    """``(score - shift) / scale``."""

    shift: float = 0.0
    scale: float = 1.0

    def __call__(self, scores):
        return (np.asarray(scores, dtype=float) - self.shift) / self.scale


def fit_normalization(scores, method: str) -> Normalization:
    """Normalization parameters estimated on a matcher's pooled scores."""
    method = _SHORT.get(method, method)
    s = np.asarray(scores, dtype=float)
    if method == "identity":
        return Normalization()
    if s.size < 2:
        raise DataError("need at least two scores to normalize")
    if method == "zscore_pooled":
        sd = float(np.std(s, ddof=1))
        if not sd > 0:
            raise DataError("degenerate z-score normalization: zero dispersion")
        return Normalization(float(np.mean(s)), sd)
    if method == "minmax_pooled":
        lo, hi = float(s.min()), float(s.max())
        if not hi > lo:
            raise DataError("degenerate min-max normalization: zero range")
        return Normalization(lo, hi - lo)
    raise ValueError(f"unknown normalization {method!r}")


def sum_fuse(scores_a, scores_b, norm_a: Normalization, norm_b: Normalization) -> np.ndarray:
    return norm_a(scores_a) + norm_b(scores_b)


def fuse_sum(ds: ScoreDataset, spec: FusionSpec) -> ScoreDataset:
    """Add a fused matcher scoring every pair that both inputs scored.

    Normalization parameters use all of each matcher's scores, genuine and
    impostor together. A pair scored by only one matcher is an error.
    """
    if spec.output_label in ds.scores:
        raise DataError(f"output label {spec.output_label!r} already present")
    a, b = ds.matcher(spec.matcher_a), ds.matcher(spec.matcher_b)
    n = ds.n_images
    ka = _pair_key(a.probe, a.reference, n)
    kb = _pair_key(b.probe, b.reference, n)
    oa, ob = np.argsort(ka), np.argsort(kb)
    if len(ka) != len(kb) or not np.array_equal(ka[oa], kb[ob]):
        only = np.setxor1d(ka, kb)
        k = int(only[0]) if only.size else None
        pair = f" e.g. ({ds.image_ids[k // n]}, {ds.image_ids[k % n]})" if k is not None else ""
        raise DataError(
            f"matchers {spec.matcher_a!r} and {spec.matcher_b!r} score different pairs ({only.size} unmatched){pair}"
        )
    na = fit_normalization(a.score, spec.normalization)
    nb = fit_normalization(b.score, spec.normalization)
    fused = np.empty(len(ka))
    fused[oa] = sum_fuse(a.score[oa], b.score[ob], na, nb)
    return ds.with_scores(spec.output_label, MatcherScores(a.probe.copy(), a.reference.copy(), fused))
