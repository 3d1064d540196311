"""Seeded synthetic longitudinal score data with known ground truth.

Random streams
--------------
All draws use numpy's PCG64 bit generator. A spec's ``seed`` feeds
``numpy.random.SeedSequence(seed)``, which is split with ``spawn`` into
independent child streams in a fixed order:

* child 0: demographics (session counts, ages, genders);
* child 1 + k: matcher ``k`` in spec order, which in turn spawns
  (random effects, genuine noise, impostor scores).

Adding a matcher therefore never perturbs the demographics or the scores of
earlier matchers. ``STREAM_VERSION`` is bumped whenever this layout changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (
    BOY,
    GIRL,
    Acquisition,
    MatcherScores,
    ScoreDataset,
    Subject,
    pair_indices,
)
from .lmm import ModelSpec

STREAM_VERSION = 1


def make_rng(seed, *spawn_key: int) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally on a derived sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


@dataclass(frozen=True)
class ModelTruth:
    """Ground-truth mixed-model parameters in standardized-score units.

    ``gamma`` follows :class:`~longface.lmm.ModelSpec` ordering: two entries
    for BT, four (``gamma00, gamma01, gamma10, gamma11``) for CGender.
    """

    gamma: tuple[float, ...] = (0.5, -0.22)
    G: tuple[tuple[float, float], tuple[float, float]] = ((0.36, -0.03), (-0.03, 0.0225))
    residual_var: float = 0.25

    @property
    def model(self) -> ModelSpec:
        return ModelSpec("BT" if len(self.gamma) == 2 else "CGender")

    def line(self, gender: int):
        """Population ``(intercept, slope)`` for a gender."""
        g = self.gamma
        if len(g) == 2:
            return g[0], g[1]
        boy = 1.0 if gender == BOY else 0.0
        return g[0] + g[1] * boy, g[2] + g[3] * boy

    def validate(self):
        if len(self.gamma) not in (2, 4):
            raise ValueError("gamma needs 2 (BT) or 4 (CGender) entries")
        G = np.asarray(self.G, dtype=float)
        if G.shape != (2, 2) or not np.allclose(G, G.T):
            raise ValueError("G must be a symmetric 2x2 matrix")
        if G[0, 0] < 0 or G[1, 1] < 0 or G[0, 1] ** 2 > G[0, 0] * G[1, 1] * (1 + 1e-12):
            raise ValueError("G must be positive semidefinite")
        if self.residual_var < 0:
            raise ValueError("residual variance must be non-negative")


@dataclass(frozen=True)
class MatcherSpec:
    """One simulated matcher: raw score = ``loc + scale * Y``."""

    matcher_id: str = "M"
    truth: ModelTruth = ModelTruth()
    loc: float = 0.0
    scale: float = 1.0
    impostor_mean: float = -4.0
    impostor_sd: float = 1.0


@dataclass(frozen=True)
class GeneratorSpec:
    n_subjects: int = 100
    sessions_per_subject: dict = field(default_factory=lambda: {4: 1.0})
    enrollment_age: tuple[float, float] = (2.0, 13.0)
    session_gap: tuple[float, float] = (0.75, 1.4)
    gender_ratio: float = 0.5
    matchers: tuple[MatcherSpec, ...] = (MatcherSpec(),)
    n_singletons: int = 0
    genuine_pairing: str = "all_pairs"
    impostors: bool = True
    seed: int = 0
    session_counts: tuple[int, ...] | None = None  # overrides sessions_per_subject

    def validate(self):
        if self.n_subjects < 0 or self.n_singletons < 0:
            raise ValueError("subject counts must be non-negative")
        sessions = {int(k): float(v) for k, v in self.sessions_per_subject.items()}
        if not sessions or any(k < 1 for k in sessions) or any(v < 0 for v in sessions.values()):
            raise ValueError("sessions_per_subject must map counts >= 1 to non-negative weights")
        if sum(sessions.values()) <= 0:
            raise ValueError("sessions_per_subject weights sum to zero")
        lo, hi = self.enrollment_age
        if not 0 <= lo <= hi:
            raise ValueError("enrollment_age must satisfy 0 <= low <= high")
        glo, ghi = self.session_gap
        if not 0 < glo <= ghi:
            raise ValueError("session_gap must satisfy 0 < low <= high")
        if not 0 <= self.gender_ratio <= 1:
            raise ValueError("gender_ratio must lie in [0, 1]")
        if self.genuine_pairing not in ("all_pairs", "enrollment_anchored"):
            raise ValueError("genuine_pairing must be all_pairs or enrollment_anchored")
        if self.session_counts is not None and (
            len(self.session_counts) != self.n_subjects or any(int(c) < 1 for c in self.session_counts)
        ):
            raise ValueError("session_counts needs one count >= 1 per subject")
        ids = [m.matcher_id for m in self.matchers]
        if len(set(ids)) != len(ids):
            raise ValueError("matcher ids must be unique")
        for m in self.matchers:
            m.truth.validate()
            if not m.scale > 0 or not m.impostor_sd > 0:
                raise ValueError(f"matcher {m.matcher_id!r}: scale and impostor_sd must be positive")


def clf_shaped(seed: int = 7, n_subjects: int = 120, n_singletons: int = 100) -> GeneratorSpec:
    """Small preset with the marginals of a children's longitudinal face set.

    2-6 images per subject (mean about 4), enrollment ages 2-13, roughly
    annual sessions so lapses stay within 7 years, two-thirds boys, and two
    matchers on unrelated raw scales. Singletons act as non-mated probes.
    """
    return GeneratorSpec(
        n_subjects=n_subjects,
        sessions_per_subject={2: 0.1, 3: 0.2, 4: 0.35, 5: 0.2, 6: 0.15},
        enrollment_age=(2.0, 13.0),
        session_gap=(0.75, 1.4),
        gender_ratio=0.66,
        matchers=(
            MatcherSpec(
                "A",
                ModelTruth((0.45, 0.05, -0.19, -0.06), ((0.36, -0.03), (-0.03, 0.0225)), 0.3),
                loc=0.62, scale=0.11, impostor_mean=0.25, impostor_sd=0.1,
            ),
            MatcherSpec(
                "B",
                ModelTruth((0.5, 0.0, -0.2, -0.05), ((0.49, -0.02), (-0.02, 0.016)), 0.35),
                loc=48.0, scale=9.0, impostor_mean=20.0, impostor_sd=8.0,
            ),
        ),
        n_singletons=n_singletons,
        genuine_pairing="all_pairs",
        seed=seed,
    )


def replica_session_counts(n_subjects: int, n_images: int, seed: int = 0, max_sessions: int = 8) -> tuple[int, ...]:
    """Per-subject image counts (2 to ``max_sessions``) summing to exactly ``n_images``."""
    if not 2 * n_subjects <= n_images <= max_sessions * n_subjects:
        raise ValueError("n_images incompatible with 2..max_sessions images per subject")
    rng = make_rng(seed, 99)
    counts = np.full(n_subjects, 2, dtype=np.int64)
    spare = n_images - counts.sum()
    while spare > 0:
        open_ = np.flatnonzero(counts < max_sessions)
        pick = rng.choice(open_, size=min(spare, len(open_)), replace=False)
        counts[pick] += 1
        spare -= len(pick)
    return tuple(int(c) for c in counts)


def sample_random_effects(G, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws of ``(b0, b1) ~ N(0, G)``; singular ``G`` allowed."""
    G = np.asarray(G, dtype=float)
    v0, c, v1 = G[0, 0], G[0, 1], G[1, 1]
    l00 = np.sqrt(v0)
    l10 = c / l00 if l00 > 0 else 0.0
    rest = v1 - l10 * l10
    l11 = np.sqrt(rest) if rest > 1e-12 * v1 else 0.0  # rounding residue of a singular G
    F = np.array([[l00, 0.0], [l10, l11]])
    return rng.standard_normal((n, 2)) @ F.T


def _demographics(spec: GeneratorSpec, rng: np.random.Generator):
    counts = np.array(sorted(int(k) for k in spec.sessions_per_subject))
    w = np.array([float(spec.sessions_per_subject[k]) for k in counts])
    n_sessions = rng.choice(counts, size=spec.n_subjects, p=w / w.sum())
    if spec.session_counts is not None:
        n_sessions = np.asarray(spec.session_counts, dtype=np.int64)
    enroll = rng.uniform(*spec.enrollment_age, size=spec.n_subjects)
    boys = rng.random(spec.n_subjects) < spec.gender_ratio
    subjects = []
    width = len(str(max(spec.n_subjects + spec.n_singletons - 1, 1)))
    for i in range(spec.n_subjects):
        gaps = rng.uniform(*spec.session_gap, size=int(n_sessions[i]) - 1)
        ages = enroll[i] + np.concatenate([[0.0], np.cumsum(gaps)])
        sid = f"S{i:0{width}d}"
        acqs = tuple(Acquisition(f"{sid}_{j}", sid, float(a)) for j, a in enumerate(ages))
        subjects.append(Subject(sid, BOY if boys[i] else GIRL, acqs))
    single_age = rng.uniform(spec.enrollment_age[0], spec.enrollment_age[1] + 5, size=spec.n_singletons)
    single_boy = rng.random(spec.n_singletons) < spec.gender_ratio
    for k in range(spec.n_singletons):
        sid = f"S{spec.n_subjects + k:0{width}d}"
        subjects.append(
            Subject(sid, BOY if single_boy[k] else GIRL, (Acquisition(f"{sid}_0", sid, float(single_age[k])),))
        )
    subjects.sort(key=lambda s: s.subject_id)
    return tuple(subjects)


def generate_longitudinal(spec: GeneratorSpec) -> tuple[ScoreDataset, dict]:
    """Simulate a dataset from the two-level model for every matcher in ``spec``.

    Genuine scores follow each subject's own line: for images ``j < k`` taken
    ``dT`` years apart, ``Y = (intercept + b0) + (slope + b1) * dT + e``;
    enrollment-anchored pairs are exactly the modelled observations.
    Impostor scores are i.i.d. normal on the raw scale.

    Returns the dataset and a truth record holding each matcher's parameters
    and the realised random effects per subject.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    children = root.spawn(1 + len(spec.matchers))
    subjects = _demographics(spec, np.random.Generator(np.random.PCG64(children[0])))
    base = ScoreDataset(subjects)
    gp, gr = pair_indices(base, spec.genuine_pairing)
    ip, ir = pair_indices(base, "impostor") if spec.impostors else (np.empty(0, np.int64),) * 2
    subj_idx = base.image_subject
    gender = np.array([1.0 if s.gender == BOY else 0.0 for s in subjects])
    scores = {}
    truth = {"stream_version": STREAM_VERSION, "seed": spec.seed, "matchers": {}}
    for k, m in enumerate(spec.matchers):
        re_ss, noise_ss, imp_ss = children[1 + k].spawn(3)
        b = sample_random_effects(m.truth.G, len(subjects), np.random.Generator(np.random.PCG64(re_ss)))
        g = m.truth.gamma
        if len(g) == 2:
            icpt = np.full(len(subjects), g[0])
            slope = np.full(len(subjects), g[1])
        else:
            icpt = g[0] + g[1] * gender
            slope = g[2] + g[3] * gender
        s = subj_idx[gp]
        dt = base.image_age[gp] - base.image_age[gr]
        eps = np.random.Generator(np.random.PCG64(noise_ss)).standard_normal(len(gp))
        y = icpt[s] + b[s, 0] + (slope[s] + b[s, 1]) * dt + np.sqrt(m.truth.residual_var) * eps
        imp = np.random.Generator(np.random.PCG64(imp_ss)).normal(m.impostor_mean, m.impostor_sd, size=len(ip))
        scores[m.matcher_id] = MatcherScores(
            np.concatenate([gp, ip]),
            np.concatenate([gr, ir]),
            np.concatenate([m.loc + m.scale * y, imp]),
        )
        truth["matchers"][m.matcher_id] = {
            "model": m.truth.model.kind,
            "gamma": list(m.truth.gamma),
            "G": [list(r) for r in m.truth.G],
            "residual_var": m.truth.residual_var,
            "loc": m.loc,
            "scale": m.scale,
            "random_effects": {subjects[i].subject_id: b[i].tolist() for i in range(len(subjects))},
        }
    ds = ScoreDataset(subjects)
    for mid, ms in scores.items():
        ds = ds.with_scores(mid, ms)
    return ds, truth


def generate_match_scores(
    n_genuine: int,
    n_impostor: int,
    genuine=(3.0, 1.0),
    impostor=(0.0, 1.0),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Independent normal genuine and impostor samples on separate sub-streams."""
    if genuine[1] <= 0 or impostor[1] <= 0:
        raise ValueError("standard deviations must be positive")
    g = make_rng(seed, 0).normal(genuine[0], genuine[1], size=n_genuine)
    i = make_rng(seed, 1).normal(impostor[0], impostor[1], size=n_impostor)
    return g, i
