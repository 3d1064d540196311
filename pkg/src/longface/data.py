"""Subjects, acquisitions and per-matcher comparison scores.

A :class:`ScoreDataset` is immutable once built. Images are held in a
canonical order (subjects sorted by id, acquisitions by age) and every
matcher's scores are stored as parallel numpy arrays of image indices and
raw scores, so that millions of impostor comparisons stay cheap.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from ._io import atomic_write_text, fmt_float

GIRL, BOY = 0, 1
_GENDER_CODES = {"0": GIRL, "f": GIRL, "girl": GIRL, "1": BOY, "m": BOY, "boy": BOY}

ACQUISITION_HEADER = ("subject_id", "image_id", "age_years", "gender")
SCORES_HEADER = ("matcher_id", "probe_image_id", "reference_image_id", "score")

PAIRING_MODES = ("enrollment_anchored", "all_pairs", "impostor")


class DataError(ValueError):
    """Input failed validation (malformed row, broken reference, bad value)."""


@dataclass(frozen=True)
class Acquisition:
    image_id: str
    subject_id: str
    age_at_capture: float


@dataclass(frozen=True)
class Subject:
    subject_id: str
    gender: int | None
    acquisitions: tuple[Acquisition, ...]

    @property
    def n_acquisitions(self) -> int:
        return len(self.acquisitions)

    @property
    def enrollment(self) -> Acquisition:
        return self.acquisitions[0]


@dataclass(frozen=True)
class ComparisonRecord:
    matcher_id: str
    probe_image_id: str
    reference_image_id: str
    raw_score: float


@dataclass(frozen=True)
class StandardizationParams:
    mean: float
    std_dev: float

    def __post_init__(self):
        if not (self.std_dev > 0 and math.isfinite(self.std_dev)):
            raise DataError(f"std_dev must be positive and finite, got {self.std_dev}")

    def apply(self, scores):
        return (np.asarray(scores, dtype=float) - self.mean) / self.std_dev


@dataclass(frozen=True)
class LongitudinalObservation:
    subject_id: str
    delta_t: float
    y_standardized: float
    gender: int | None = None
    raw_score: float = math.nan


@dataclass(frozen=True, eq=False)
class MatcherScores:
    """Scores of one matcher as parallel arrays over canonical image indices."""

    probe: np.ndarray
    reference: np.ndarray
    score: np.ndarray

    def __len__(self) -> int:
        return len(self.score)


@dataclass(frozen=True, eq=False)
class ScoreDataset:
    subjects: tuple[Subject, ...]
    scores: dict[str, MatcherScores] = field(default_factory=dict)

    def __post_init__(self):
        images = [a for s in self.subjects for a in s.acquisitions]
        object.__setattr__(self, "image_ids", tuple(a.image_id for a in images))
        object.__setattr__(
            self, "image_index", {img: k for k, img in enumerate(self.image_ids)}
        )
        subj_of, rank_of = [], []
        for si, s in enumerate(self.subjects):
            subj_of.extend([si] * len(s.acquisitions))
            rank_of.extend(range(len(s.acquisitions)))
        object.__setattr__(self, "image_subject", np.asarray(subj_of, dtype=np.int64))
        object.__setattr__(self, "image_rank", np.asarray(rank_of, dtype=np.int64))
        object.__setattr__(
            self,
            "image_age",
            np.asarray([a.age_at_capture for a in images], dtype=float),
        )
        for arr in ("image_subject", "image_rank", "image_age"):
            getattr(self, arr).flags.writeable = False
        keys = {}
        for m, ms in self.scores.items():
            for a in (ms.probe, ms.reference, ms.score):
                a.flags.writeable = False
            keys[m] = None
        object.__setattr__(self, "_pair_keys", keys)

    # -- basic views -------------------------------------------------------

    @property
    def matcher_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.scores))

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def subject_of(self, image_id: str) -> Subject:
        return self.subjects[self.image_subject[self.image_index[image_id]]]

    def is_genuine(self, image_a: str, image_b: str) -> bool:
        ia, ib = self.image_index[image_a], self.image_index[image_b]
        return bool(self.image_subject[ia] == self.image_subject[ib])

    def records(self, matcher_id: str | None = None) -> Iterator[ComparisonRecord]:
        for m in [matcher_id] if matcher_id else self.matcher_ids:
            ms = self.matcher(m)
            for p, r, s in zip(ms.probe.tolist(), ms.reference.tolist(), ms.score.tolist()):
                yield ComparisonRecord(m, self.image_ids[p], self.image_ids[r], s)

    def matcher(self, matcher_id: str) -> MatcherScores:
        try:
            return self.scores[matcher_id]
        except KeyError:
            raise DataError(
                f"unknown matcher {matcher_id!r}; available: {', '.join(self.matcher_ids) or 'none'}"
            ) from None

    def with_scores(self, matcher_id: str, scores: MatcherScores) -> "ScoreDataset":
        if matcher_id in self.scores:
            raise DataError(f"matcher {matcher_id!r} already present")
        new = dict(self.scores)
        new[matcher_id] = _canonical_scores(scores, self.n_images, matcher_id)
        return ScoreDataset(self.subjects, new)

    # -- pair lookup -------------------------------------------------------

    def _keys(self, matcher_id):
        cached = self._pair_keys.get(matcher_id)
        if cached is None:
            ms = self.matcher(matcher_id)
            key = _pair_key(ms.probe, ms.reference, self.n_images)
            order = np.argsort(key, kind="stable")
            cached = (key[order], ms.score[order])
            self._pair_keys[matcher_id] = cached
        return cached

    def pair_scores(self, matcher_id: str, a, b) -> np.ndarray:
        """Scores of image-index pairs ``(a[k], b[k])``; NaN where unscored."""
        skey, sscore = self._keys(matcher_id)
        key = _pair_key(np.asarray(a), np.asarray(b), self.n_images)
        pos = np.searchsorted(skey, key)
        pos = np.minimum(pos, len(skey) - 1) if len(skey) else pos
        out = np.full(key.shape, np.nan)
        if len(skey):
            hit = skey[pos] == key
            out[hit] = sscore[pos[hit]]
        return out

    def genuine_mask(self, matcher_id: str) -> np.ndarray:
        ms = self.matcher(matcher_id)
        return self.image_subject[ms.probe] == self.image_subject[ms.reference]

    # -- equality on the canonical form -----------------------------------

    def __eq__(self, other):
        if not isinstance(other, ScoreDataset):
            return NotImplemented
        if self.subjects != other.subjects or self.matcher_ids != other.matcher_ids:
            return False
        for m in self.matcher_ids:
            a, b = self.scores[m], other.scores[m]
            if not (
                np.array_equal(a.probe, b.probe)
                and np.array_equal(a.reference, b.reference)
                and np.array_equal(a.score, b.score)
            ):
                return False
        return True

    __hash__ = None

    def counts(self) -> dict:
        return {
            "subjects": len(self.subjects),
            "images": self.n_images,
            "records": {m: len(self.scores[m]) for m in self.matcher_ids},
        }


def _pair_key(a, b, n):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return np.minimum(a, b) * n + np.maximum(a, b)


def _canonical_scores(ms: MatcherScores, n_images: int, matcher_id: str) -> MatcherScores:
    probe = np.asarray(ms.probe, dtype=np.int64)
    ref = np.asarray(ms.reference, dtype=np.int64)
    score = np.asarray(ms.score, dtype=float)
    if not (len(probe) == len(ref) == len(score)):
        raise DataError("probe, reference and score arrays differ in length")
    if np.any(probe == ref):
        raise DataError(f"matcher {matcher_id!r}: image compared with itself")
    if not np.all(np.isfinite(score)):
        raise DataError(f"matcher {matcher_id!r}: non-finite score")
    key = _pair_key(probe, ref, n_images)
    if len(np.unique(key)) != len(key):
        raise DataError(f"matcher {matcher_id!r}: duplicate image pair")
    order = np.lexsort((ref, probe))
    return MatcherScores(probe[order], ref[order], score[order])


def build_dataset(
    acquisitions: Iterable[Acquisition],
    genders: dict[str, int | None],
    records: Iterable[ComparisonRecord] = (),
) -> ScoreDataset:
    """Validate and assemble a dataset from loose acquisitions and records."""
    by_subject: dict[str, list[Acquisition]] = {}
    seen = set()
    for a in acquisitions:
        if a.image_id in seen:
            raise DataError(f"duplicate image_id {a.image_id!r}")
        seen.add(a.image_id)
        if not math.isfinite(a.age_at_capture) or a.age_at_capture < 0:
            raise DataError(f"image {a.image_id!r}: invalid age {a.age_at_capture}")
        by_subject.setdefault(a.subject_id, []).append(a)
    subjects = []
    for sid in sorted(by_subject):
        acqs = sorted(by_subject[sid], key=lambda a: a.age_at_capture)
        for prev, cur in zip(acqs, acqs[1:]):
            if not cur.age_at_capture > prev.age_at_capture:
                raise DataError(
                    f"subject {sid!r}: images {prev.image_id!r} and {cur.image_id!r} "
                    "share an age; acquisitions must be strictly ordered by age"
                )
        subjects.append(Subject(sid, genders.get(sid), tuple(acqs)))
    base = ScoreDataset(tuple(subjects))
    index = base.image_index
    grouped: dict[str, tuple[list, list, list]] = {}
    for r in records:
        for img in (r.probe_image_id, r.reference_image_id):
            if img not in index:
                raise DataError(
                    f"record ({r.matcher_id}, {r.probe_image_id}, {r.reference_image_id}) "
                    f"references unknown image {img!r}"
                )
        p, q, s = grouped.setdefault(r.matcher_id, ([], [], []))
        p.append(index[r.probe_image_id])
        q.append(index[r.reference_image_id])
        s.append(r.raw_score)
    scores = {
        m: _canonical_scores(MatcherScores(np.array(p), np.array(q), np.array(s, dtype=float)),
                             base.n_images, m)
        for m, (p, q, s) in grouped.items()
    }
    return ScoreDataset(base.subjects, scores)


# ---------------------------------------------------------------------------
# CSV ingestion / export


def _open(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline=""), True
    return source, False


def _csv_rows(stream: TextIO, header: Sequence[str], what: str):
    """Yield ``(line_number, row)`` after skipping leading ``#`` comment lines."""
    n_comment = 0
    first = stream.readline()
    while first.startswith("#"):
        n_comment += 1
        first = stream.readline()
    reader = csv.reader(io.StringIO(first))
    got = next(reader, None)
    if got is None or [h.strip() for h in got] != list(header):
        raise DataError(
            f"{what}: line {n_comment + 1}: expected header {','.join(header)!r}, got {first.strip()!r}"
        )
    reader = csv.reader(stream)
    offset = n_comment + 1
    for row in reader:
        if not row:
            continue
        line = reader.line_num + offset
        if len(row) != len(header):
            raise DataError(f"{what}: line {line}: expected {len(header)} fields, got {len(row)}")
        yield line, row


def parse_gender(value: str) -> int | None:
    v = value.strip().lower()
    if v == "":
        return None
    if v not in _GENDER_CODES:
        raise DataError(f"unrecognised gender {value!r}")
    return _GENDER_CODES[v]


def read_acquisitions(source) -> tuple[list[Acquisition], dict[str, int | None]]:
    stream, close = _open(source)
    acqs, genders = [], {}
    try:
        for line, (sid, img, age, gender) in _csv_rows(stream, ACQUISITION_HEADER, "acquisitions"):
            try:
                age_v = float(age)
            except ValueError:
                raise DataError(f"acquisitions: line {line}: field age_years: not a number {age!r}") from None
            if not math.isfinite(age_v) or age_v < 0:
                raise DataError(f"acquisitions: line {line}: field age_years: invalid age {age!r}")
            try:
                g = parse_gender(gender)
            except DataError as e:
                raise DataError(f"acquisitions: line {line}: field gender: {e}") from None
            if sid in genders and genders[sid] != g:
                raise DataError(f"acquisitions: line {line}: gender of subject {sid!r} is inconsistent")
            genders[sid] = g
            acqs.append(Acquisition(img, sid, age_v))
    finally:
        if close:
            stream.close()
    return acqs, genders


def read_scores(source) -> Iterator[ComparisonRecord]:
    stream, close = _open(source)
    try:
        for line, (m, p, r, s) in _csv_rows(stream, SCORES_HEADER, "scores"):
            try:
                v = float(s)
            except ValueError:
                raise DataError(f"scores: line {line}: field score: not a number {s!r}") from None
            if not math.isfinite(v):
                raise DataError(f"scores: line {line}: field score: non-finite {s!r}")
            if p == r:
                raise DataError(f"scores: line {line}: probe and reference are the same image {p!r}")
            yield ComparisonRecord(m, p, r, v)
    finally:
        if close:
            stream.close()


def ingest_dataset(acquisitions_source, scores_source=None) -> ScoreDataset:
    acqs, genders = read_acquisitions(acquisitions_source)
    records = read_scores(scores_source) if scores_source is not None else ()
    return build_dataset(acqs, genders, records)


def load_dataset(directory) -> ScoreDataset:
    """Read ``acquisitions.csv`` and (if present) ``scores.csv`` from a directory."""
    d = Path(directory)
    scores = d / "scores.csv"
    return ingest_dataset(d / "acquisitions.csv", scores if scores.exists() else None)


def acquisitions_csv(ds: ScoreDataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(ACQUISITION_HEADER)
    for s in ds.subjects:
        g = "" if s.gender is None else str(s.gender)
        for a in s.acquisitions:
            w.writerow((s.subject_id, a.image_id, fmt_float(a.age_at_capture), g))
    return out.getvalue()


def scores_csv(ds: ScoreDataset) -> str:
    ids = ds.image_ids
    parts = [",".join(SCORES_HEADER) + "\n"]
    for m in ds.matcher_ids:
        ms = ds.scores[m]
        mq = _csv_field(m)
        pid = [_csv_field(ids[k]) for k in range(len(ids))]
        parts.extend(
            f"{mq},{pid[p]},{pid[r]},{fmt_float(s)}\n"
            for p, r, s in zip(ms.probe.tolist(), ms.reference.tolist(), ms.score.tolist())
        )
    return "".join(parts)


def _csv_field(s: str) -> str:
    if any(c in s for c in ',"\n\r'):
        return '"' + s.replace('"', '""') + '"'
    return s


def export_dataset(ds: ScoreDataset, directory, header: str = "") -> None:
    """Write the canonical CSV pair; ``header`` is emitted as ``#`` comment lines."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / "acquisitions.csv", header + acquisitions_csv(ds))
    atomic_write_text(d / "scores.csv", header + scores_csv(ds))


def read_embeddings(source) -> dict[str, np.ndarray]:
    """Parse ``image_id,d,v_0,...,v_{d-1}`` rows (no fixed header width)."""
    stream, close = _open(source)
    out = {}
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None or header[:2] != ["image_id", "d"]:
            raise DataError("embeddings: line 1: expected header starting 'image_id,d'")
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            try:
                d = int(row[1])
                vec = np.array([float(v) for v in row[2:]])
            except (ValueError, IndexError):
                raise DataError(f"embeddings: line {line}: malformed row") from None
            if len(vec) != d:
                raise DataError(f"embeddings: line {line}: declared d={d} but {len(vec)} values")
            if row[0] in out:
                raise DataError(f"embeddings: line {line}: duplicate image_id {row[0]!r}")
            out[row[0]] = vec
    finally:
        if close:
            stream.close()
    return out


# ---------------------------------------------------------------------------
# scoring and pair enumeration


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def scores_from_embeddings(
    ds: ScoreDataset,
    embeddings: dict[str, np.ndarray],
    matcher_id: str,
    modes: Sequence[str] = ("all_pairs", "impostor"),
) -> ScoreDataset:
    """Cosine-score the requested pair families and add them as a new matcher."""
    missing = [img for img in ds.image_ids if img not in embeddings]
    if missing:
        raise DataError(f"no embedding for image {missing[0]!r} ({len(missing)} missing)")
    dims = {len(v) for v in embeddings.values()}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch among embeddings: {sorted(dims)}")
    E = np.stack([embeddings[img] for img in ds.image_ids])
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        bad = ds.image_ids[int(np.argmin(norms))]
        raise ValueError(f"zero-norm embedding for image {bad!r}")
    E = E / norms[:, None]
    probe, ref = [], []
    for mode in dict.fromkeys(modes):
        p, r = pair_indices(ds, mode)
        probe.append(p)
        ref.append(r)
    p = np.concatenate(probe)
    r = np.concatenate(ref)
    key = _pair_key(p, r, ds.n_images)
    _, first = np.unique(key, return_index=True)
    p, r = p[first], r[first]
    s = np.clip(np.einsum("ij,ij->i", E[p], E[r]), -1.0, 1.0)
    return ds.with_scores(matcher_id, MatcherScores(p, r, s))


def pair_indices(ds: ScoreDataset, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Image-index arrays ``(probe, reference)`` for a pairing mode.

    Genuine pairs put the later acquisition in the probe slot; the reference
    is the enrollment image (``enrollment_anchored``) or the earlier image
    (``all_pairs``).
    """
    if mode not in PAIRING_MODES:
        raise ValueError(f"unknown pairing mode {mode!r}; expected one of {PAIRING_MODES}")
    starts = np.cumsum([0] + [s.n_acquisitions for s in ds.subjects])
    if mode == "enrollment_anchored":
        later = np.flatnonzero(ds.image_rank > 0)
        return later, starts[ds.image_subject[later]]
    if mode == "all_pairs":
        probe, ref = [], []
        for s0, s1 in zip(starts[:-1], starts[1:]):
            j, i = np.triu_indices(s1 - s0, k=1)
            probe.append(s0 + i)
            ref.append(s0 + j)
        if not probe:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(probe).astype(np.int64), np.concatenate(ref).astype(np.int64)
    n = ds.n_images
    i, j = np.triu_indices(n, k=1)
    keep = ds.image_subject[i] != ds.image_subject[j]
    return j[keep].astype(np.int64), i[keep].astype(np.int64)


def enumerate_pairs(ds: ScoreDataset, mode: str) -> list[tuple[str, str, bool]]:
    p, r = pair_indices(ds, mode)
    ids = ds.image_ids
    genuine = mode != "impostor"
    return [(ids[a], ids[b], genuine) for a, b in zip(p.tolist(), r.tolist())]


def standardize_genuine(scores) -> tuple[StandardizationParams, np.ndarray]:
    y = np.asarray(scores, dtype=float)
    if y.size < 2:
        raise DataError(f"need at least 2 scores to standardize, got {y.size}")
    mu = float(np.mean(y))
    sd = float(np.std(y, ddof=1))
    if not sd > 0:
        raise DataError("genuine scores have zero dispersion")
    params = StandardizationParams(mu, sd)
    return params, params.apply(y)


def genuine_scores(ds: ScoreDataset, matcher_id: str, pairing: str = "enrollment_anchored"):
    """``(probe_idx, reference_idx, raw_scores)`` for the genuine pairs of a pairing mode."""
    if pairing == "impostor":
        raise ValueError("genuine_scores needs a genuine pairing mode")
    p, r = pair_indices(ds, pairing)
    s = ds.pair_scores(matcher_id, p, r)
    if np.isnan(s).any():
        k = int(np.flatnonzero(np.isnan(s))[0])
        raise DataError(
            f"matcher {matcher_id!r} has no score for genuine pair "
            f"({ds.image_ids[p[k]]}, {ds.image_ids[r[k]]})"
        )
    return p, r, s


def longitudinal_observations(
    ds: ScoreDataset,
    matcher_id: str,
    standardize_on: str | None = "enrollment_anchored",
    params: StandardizationParams | None = None,
) -> tuple[list[LongitudinalObservation], StandardizationParams | None]:
    """Enrollment-anchored genuine scores as model-ready observations.

    ``standardize_on`` picks the genuine set whose mean and sample standard
    deviation define the standardization (``None`` keeps raw scores). An
    explicit ``params`` overrides it.
    """
    p, r, s = genuine_scores(ds, matcher_id, "enrollment_anchored")
    if params is None and standardize_on is not None:
        if standardize_on == "enrollment_anchored":
            params, _ = standardize_genuine(s)
        else:
            params, _ = standardize_genuine(genuine_scores(ds, matcher_id, standardize_on)[2])
    y = params.apply(s) if params is not None else s
    dt = ds.image_age[p] - ds.image_age[r]
    obs = []
    for k in range(len(p)):
        subj = ds.subjects[ds.image_subject[p[k]]]
        obs.append(
            LongitudinalObservation(subj.subject_id, float(dt[k]), float(y[k]), subj.gender, float(s[k]))
        )
    return obs, params


def lapse_years(ds: ScoreDataset, probe, reference) -> np.ndarray:
    return np.abs(ds.image_age[np.asarray(probe)] - ds.image_age[np.asarray(reference)])


def summarize(ds: ScoreDataset) -> dict:
    """Dataset statistics: counts and the four marginal histograms."""
    per_subject = Counter(s.n_acquisitions for s in ds.subjects)
    ages = Counter(int(math.floor(a)) for a in ds.image_age.tolist())
    enroll = Counter(int(math.floor(s.enrollment.age_at_capture)) for s in ds.subjects)
    spans = Counter(
        int(math.floor(s.acquisitions[-1].age_at_capture - s.enrollment.age_at_capture + 0.5))
        for s in ds.subjects
        if s.n_acquisitions > 1
    )
    genders = Counter({GIRL: "girl", BOY: "boy", None: "unknown"}[s.gender] for s in ds.subjects)

    def hist(c):
        return {str(k): c[k] for k in sorted(c)}

    return {
        "subjects": len(ds.subjects),
        "images": ds.n_images,
        "images_per_subject_mean": ds.n_images / len(ds.subjects) if ds.subjects else 0.0,
        "gender": {k: genders[k] for k in sorted(genders)},
        "images_per_subject_histogram": hist(per_subject),
        "age_histogram_years": hist(ages),
        "enrollment_age_histogram_years": hist(enroll),
        "lapse_histogram_years": hist(spans),
        "records": {m: len(ds.scores[m]) for m in ds.matcher_ids},
    }
