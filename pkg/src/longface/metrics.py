"""Verification and open-set identification metrics.

Conventions shared by every routine here (and by the test oracles):

* a comparison is accepted when ``score >= threshold``;
* the operating threshold for a FAR target is the smallest candidate whose
  false accept rate does not exceed the target, where candidates are the
  impostor scores themselves, the global minimum score (accept everything)
  and the point just above the largest impostor score (accept no impostor);
* open-set FAR is the non-mated false positive identification rate: the
  fraction of non-mated probes whose best gallery score is accepted;
* a mated probe's rank counts every other gallery entry scoring at least as
  high as the true mate (ties are resolved against the mate).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DataError, ScoreDataset, genuine_scores, lapse_years

log = logging.getLogger(__name__)

PROTOCOL_METADATA = {
    "tie_convention": "accept when score >= threshold",
    "threshold_rule": "smallest impostor-derived threshold with FAR <= target",
    "far_definition_verification": "fraction of impostor comparisons accepted",
    "far_definition_openset": "FPIR: fraction of non-mated probes whose maximum gallery score is accepted",
    "rank_ties": "gallery entries tied with the mate rank ahead of it",
    "bucket_rule": "a lapse dT belongs to bucket k when floor(dT + 0.5) == k",
}

OK = "ok"
BELOW_RESOLUTION = "far_target_below_resolution"


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Exact empirical ROC: one point per distinct score, plus a +inf endpoint."""

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray
    genuine_count: int
    impostor_count: int

    def __len__(self):
        return len(self.thresholds)

    @property
    def impostor_points(self) -> np.ndarray:
        """Indices of thresholds that are impostor scores (FAR drops just after them)."""
        return np.flatnonzero(self.far[:-1] > self.far[1:])

    def points(self):
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.tar.tolist()))


@dataclass(frozen=True)
class OperatingPoint:
    far_target: float
    threshold: float
    tar: float
    achieved_far: float
    status: str = OK


def build_roc(genuine, impostor) -> RocCurve:
    g = np.sort(np.asarray(genuine, dtype=float).ravel())
    i = np.sort(np.asarray(impostor, dtype=float).ravel())
    if g.size == 0 or i.size == 0:
        raise ValueError("build_roc needs non-empty genuine and impostor score lists")
    thr = np.unique(np.concatenate([g, i]))
    far = (i.size - np.searchsorted(i, thr, side="left")) / i.size
    tar = (g.size - np.searchsorted(g, thr, side="left")) / g.size
    return RocCurve(
        thresholds=np.append(thr, np.inf),
        far=np.append(far, 0.0),
        tar=np.append(tar, 0.0),
        genuine_count=int(g.size),
        impostor_count=int(i.size),
    )


def _check_far(far_target):
    if not 0 < far_target <= 1:
        raise ValueError(f"FAR target must lie in (0, 1], got {far_target}")


def operating_point(roc: RocCurve, far_target: float) -> OperatingPoint:
    _check_far(far_target)
    status = OK if far_target * roc.impostor_count >= 1 else BELOW_RESOLUTION
    # far is non-increasing: first index meeting the target
    k0 = int(np.searchsorted(-roc.far, -far_target, side="left"))
    if k0 == 0:
        k = 0
        thr = float(roc.thresholds[0])
    else:
        imp = roc.impostor_points
        j = int(np.searchsorted(imp, k0))
        if j < len(imp):
            k = int(imp[j])
            thr = float(roc.thresholds[k])
        else:
            # nothing but the no-impostor point qualifies
            k = int(imp[-1]) + 1
            thr = float(np.nextafter(roc.thresholds[imp[-1]], np.inf))
            status = BELOW_RESOLUTION
    if status != OK:
        log.warning("FAR target %g is finer than 1/%d impostor scores", far_target, roc.impostor_count)
    return OperatingPoint(float(far_target), thr, float(roc.tar[k]), float(roc.far[k]), status)


def impostor_thresholds(impostor, far_targets: Sequence[float], floor: float | None = None):
    """Thresholds for FAR targets from an impostor sample alone.

    Returns a list of ``(threshold, achieved_far, status)``. ``floor`` is the
    accept-everything threshold used when the target is 1; it defaults to
    the smallest impostor score.
    """
    i = np.sort(np.asarray(impostor, dtype=float))
    n = i.size
    if n == 0:
        raise ValueError("no impostor scores")
    floor = float(i[0]) if floor is None else min(float(floor), float(i[0]))
    distinct = np.unique(i)
    far_d = (n - np.searchsorted(i, distinct, side="left")) / n
    out = []
    for t in far_targets:
        _check_far(t)
        status = OK if t * n >= 1 else BELOW_RESOLUTION
        if t >= 1:
            out.append((floor, 1.0, status))
            continue
        k = int(np.searchsorted(-far_d, -t, side="left"))
        if k < len(distinct):
            out.append((float(distinct[k]), float(far_d[k]), status))
        else:
            out.append((float(np.nextafter(distinct[-1], np.inf)), 0.0, BELOW_RESOLUTION))
    return out


def matcher_scores_split(ds: ScoreDataset, matcher_id: str):
    """All genuine and impostor raw scores of a matcher."""
    ms = ds.matcher(matcher_id)
    gm = ds.genuine_mask(matcher_id)
    return ms.score[gm], ms.score[~gm]


def bucket_of(lapse) -> np.ndarray:
    return np.floor(np.asarray(lapse, dtype=float) + 0.5).astype(np.int64)


def verification_by_elapsed_time(
    ds: ScoreDataset,
    matcher_id: str,
    far_targets: Sequence[float],
    bucket_years: Sequence[int],
    pairing: str = "enrollment_anchored",
) -> list[dict]:
    """TAR per (lapse bucket, FAR target) against one pooled impostor distribution."""
    _, impostor = matcher_scores_split(ds, matcher_id)
    if impostor.size == 0:
        raise DataError(f"matcher {matcher_id!r} has no impostor scores")
    p, r, gen = genuine_scores(ds, matcher_id, pairing)
    buckets = bucket_of(lapse_years(ds, p, r))
    floor = min(float(gen.min()), float(impostor.min())) if gen.size else None
    thresholds = impostor_thresholds(impostor, far_targets, floor)
    rows = []
    for k in bucket_years:
        g = gen[buckets == int(k)]
        if g.size == 0:
            log.warning("no genuine pairs with lapse bucket %d", k)
        for t, (thr, achieved, status) in zip(far_targets, thresholds):
            rows.append(
                {
                    "bucket_years": int(k),
                    "far_target": float(t),
                    "threshold": thr,
                    "achieved_far": achieved,
                    "tar": float(np.mean(g >= thr)) if g.size else float("nan"),
                    "n_genuine": int(g.size),
                    "n_impostor": int(impostor.size),
                    "status": status if g.size else "empty_bucket",
                }
            )
    return rows


# ---------------------------------------------------------------------------
# open-set identification


@dataclass(frozen=True)
class OpenSetProtocol:
    gallery: tuple[str, ...]
    mated_probes: tuple[str, ...]
    nonmated_probes: tuple[str, ...]
    ranks: tuple[int, ...] = (1,)
    far_targets: tuple[float, ...] = (0.01,)

    def validate(self, ds: ScoreDataset):
        for img in self.gallery + self.mated_probes + self.nonmated_probes:
            if img not in ds.image_index:
                raise DataError(f"protocol references unknown image {img!r}")
        gsubj = [ds.subject_of(g).subject_id for g in self.gallery]
        if len(set(gsubj)) != len(gsubj):
            raise DataError("gallery must hold exactly one image per subject")
        gset = set(self.gallery)
        if gset & (set(self.mated_probes) | set(self.nonmated_probes)):
            raise DataError("probe sets must be disjoint from the gallery")
        if set(self.mated_probes) & set(self.nonmated_probes):
            raise DataError("mated and non-mated probes overlap")
        known = set(gsubj)
        for p in self.mated_probes:
            if ds.subject_of(p).subject_id not in known:
                raise DataError(f"mated probe {p!r} has no mate in the gallery")
        for p in self.nonmated_probes:
            if ds.subject_of(p).subject_id in known:
                raise DataError(f"non-mated probe {p!r} has a mate in the gallery")
        if not self.ranks or any(r < 1 for r in self.ranks):
            raise ValueError("ranks must be positive integers")
        for t in self.far_targets:
            _check_far(t)


def default_protocol(
    ds: ScoreDataset,
    ranks=(1, 3),
    far_targets=(0.01,),
    lapse_bucket: int | None = None,
) -> OpenSetProtocol:
    """Enrollment images of multi-image subjects form the gallery.

    Their later images are mated probes (optionally only those in one lapse
    bucket); every image of a single-image subject is a non-mated probe.
    """
    gallery, mated, nonmated = [], [], []
    for s in ds.subjects:
        if s.n_acquisitions >= 2:
            gallery.append(s.enrollment.image_id)
            for a in s.acquisitions[1:]:
                lapse = a.age_at_capture - s.enrollment.age_at_capture
                if lapse_bucket is None or int(bucket_of(lapse)) == lapse_bucket:
                    mated.append(a.image_id)
        else:
            nonmated.append(s.enrollment.image_id)
    return OpenSetProtocol(tuple(gallery), tuple(mated), tuple(nonmated), tuple(ranks), tuple(far_targets))


def _probe_gallery_matrix(ds, matcher_id, probes, gallery):
    pi = np.array([ds.image_index[p] for p in probes], dtype=np.int64)
    gi = np.array([ds.image_index[g] for g in gallery], dtype=np.int64)
    P, Gm = np.meshgrid(pi, gi, indexing="ij")
    S = ds.pair_scores(matcher_id, P.ravel(), Gm.ravel()).reshape(P.shape)
    if np.isnan(S).any():
        a, b = np.argwhere(np.isnan(S))[0]
        raise DataError(f"matcher {matcher_id!r} has no score for probe {probes[a]!r} vs gallery {gallery[b]!r}")
    return S


def openset_threshold(nonmated_max, far_target: float, floor: float):
    """``(threshold, achieved_fpir, status)`` from non-mated maximum scores."""
    _check_far(far_target)
    if len(nonmated_max) == 0:
        if far_target < 1:
            raise DataError("no non-mated probes: open-set FAR below 1 is undefined")
        return floor, 1.0, OK
    return impostor_thresholds(nonmated_max, [far_target], floor)[0]


def open_set_identify(ds: ScoreDataset, matcher_id: str, protocol: OpenSetProtocol) -> list[dict]:
    """DIR per (rank, FAR) for an explicit gallery / probe protocol."""
    ds.matcher(matcher_id)
    protocol.validate(ds)
    gallery = list(protocol.gallery)
    if not gallery:
        raise DataError("empty gallery")
    mated = list(protocol.mated_probes)
    nonmated = list(protocol.nonmated_probes)
    col = {ds.subject_of(g).subject_id: k for k, g in enumerate(gallery)}
    Sm = _probe_gallery_matrix(ds, matcher_id, mated, gallery) if mated else np.empty((0, len(gallery)))
    Sn = _probe_gallery_matrix(ds, matcher_id, nonmated, gallery) if nonmated else np.empty((0, len(gallery)))
    mate_col = np.array([col[ds.subject_of(p).subject_id] for p in mated], dtype=np.int64)
    mate = Sm[np.arange(len(mated)), mate_col]
    # rank = 1 + other gallery entries scoring >= the mate
    rank = (Sm >= mate[:, None]).sum(axis=1)
    nm_max = Sn.max(axis=1) if len(nonmated) else np.empty(0)
    floor = float(min(Sm.min() if Sm.size else np.inf, Sn.min() if Sn.size else np.inf))
    rows = []
    for t in protocol.far_targets:
        thr, achieved, status = openset_threshold(nm_max, t, floor)
        for r in protocol.ranks:
            hit = (rank <= r) & (mate >= thr)
            rows.append(
                {
                    "rank": int(r),
                    "far_target": float(t),
                    "threshold": float(thr),
                    "achieved_fpir": float(achieved),
                    "dir": float(hit.mean()) if len(mated) else float("nan"),
                    "n_mated": len(mated),
                    "n_nonmated": len(nonmated),
                    "status": status,
                }
            )
    return rows


def closed_set_rate(ds: ScoreDataset, matcher_id: str, protocol: OpenSetProtocol, rank: int) -> float:
    """Fraction of mated probes whose mate ranks within ``rank`` (no threshold)."""
    gallery = list(protocol.gallery)
    mated = list(protocol.mated_probes)
    col = {ds.subject_of(g).subject_id: k for k, g in enumerate(gallery)}
    S = _probe_gallery_matrix(ds, matcher_id, mated, gallery)
    mate = S[np.arange(len(mated)), [col[ds.subject_of(p).subject_id] for p in mated]]
    return float(((S >= mate[:, None]).sum(axis=1) <= rank).mean())
