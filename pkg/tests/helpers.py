"""Independent oracles and small builders shared by the test modules.

The oracles deliberately avoid the code paths they check: ROC and DIR are
recounted with dense comparisons, likelihoods with one full covariance.
"""

import math

import numpy as np

from longface.data import BOY, GIRL, Acquisition, LongitudinalObservation, MatcherScores, ScoreDataset, Subject


# -- verification ------------------------------------------------------------


def brute_far(impostor, t):
    return sum(1 for s in impostor if s >= t) / len(impostor)


def brute_operating_point(genuine, impostor, far_target):
    """Smallest impostor-derived candidate threshold with FAR <= target."""
    scores = list(genuine) + list(impostor)
    cands = sorted(set(impostor) | {min(scores), float(np.nextafter(max(impostor), np.inf))})
    for t in cands:
        far = brute_far(impostor, t)
        if far <= far_target:
            tar = sum(1 for s in genuine if s >= t) / len(genuine)
            return t, tar, far
    raise AssertionError("unreachable: the top candidate accepts no impostor")


def dense_operating_point(genuine, impostor, far_target):
    """Same rule as :func:`brute_operating_point` with O(C * n) dense counting."""
    g = np.asarray(genuine, float)
    i = np.asarray(impostor, float)
    cands = np.unique(np.concatenate([i, [min(g.min(), i.min()), np.nextafter(i.max(), np.inf)]]))
    far = (i[None, :] >= cands[:, None]).mean(axis=1)
    k = int(np.flatnonzero(far <= far_target)[0])
    t = cands[k]
    return float(t), float((g >= t).mean()), float(far[k])


# -- open-set identification -------------------------------------------------


def openset_dataset(rng, n_gallery, mated_per, n_nonmated, levels=None):
    """Gallery subjects with extra (mated) images plus single-image subjects.

    Scores are drawn on a coarse grid when ``levels`` is given, so ties occur.
    Every probe is scored against every gallery image.
    """
    subjects = []
    for k in range(n_gallery):
        sid = f"G{k:03d}"
        m = int(rng.integers(0, mated_per + 1))
        acqs = tuple(Acquisition(f"{sid}_{j}", sid, 5.0 + j) for j in range(m + 1))
        subjects.append(Subject(sid, GIRL, acqs))
    for k in range(n_nonmated):
        sid = f"N{k:03d}"
        subjects.append(Subject(sid, BOY, (Acquisition(f"{sid}_0", sid, 6.0),)))
    ds = ScoreDataset(tuple(subjects))
    gallery = [s.acquisitions[0].image_id for s in subjects if s.subject_id.startswith("G")]
    mated = [a.image_id for s in subjects if s.subject_id.startswith("G") for a in s.acquisitions[1:]]
    nonmated = [s.acquisitions[0].image_id for s in subjects if s.subject_id.startswith("N")]
    P, R, S = [], [], []
    for p in mated + nonmated:
        for g in gallery:
            mate = ds.subject_of(p).subject_id == ds.subject_of(g).subject_id
            s = rng.normal(1.0 if mate else 0.0, 0.7)
            if levels:
                s = round(s * levels) / levels
            P.append(ds.image_index[p])
            R.append(ds.image_index[g])
            S.append(s)
    ds = ds.with_scores("M", MatcherScores(np.array(P), np.array(R), np.array(S, float)))
    return ds, gallery, mated, nonmated


def brute_dir(ds, gallery, mated, nonmated, rank, far_target):
    """DIR by explicit loops: FPIR threshold from non-mated maxima, then rank and gate."""

    ms = ds.matcher("M")
    table = {}
    for a, b, s in zip(ms.probe.tolist(), ms.reference.tolist(), ms.score.tolist()):
        table[ds.image_ids[a], ds.image_ids[b]] = table[ds.image_ids[b], ds.image_ids[a]] = s

    def score(p, g):
        return table[p, g]

    nm_max = [max(score(p, g) for g in gallery) for p in nonmated]
    everything = [score(p, g) for p in mated + nonmated for g in gallery]
    floor = min(everything)
    if nm_max:
        cands = sorted(set(nm_max) | {min(floor, min(nm_max)), float(np.nextafter(max(nm_max), np.inf))})
        tau = next(t for t in cands if sum(1 for s in nm_max if s >= t) / len(nm_max) <= far_target)
    else:
        tau = floor
    hits = 0
    for p in mated:
        sid = ds.subject_of(p).subject_id
        mate_g = next(g for g in gallery if ds.subject_of(g).subject_id == sid)
        ms = score(p, mate_g)
        r = sum(1 for g in gallery if score(p, g) >= ms)
        hits += (r <= rank) and (ms >= tau)
    return tau, hits / len(mated) if mated else math.nan


# -- mixed models ------------------------------------------------------------


def dense_neg2(observations, gender_model, beta, G, s2):
    """-2 log L from the full n x n marginal covariance."""
    obs = sorted(observations, key=lambda o: o.subject_id)
    n = len(obs)
    t = np.array([o.delta_t for o in obs])
    y = np.array([o.y_standardized for o in obs])
    if gender_model:
        g = np.array([float(o.gender) for o in obs])
        X = np.column_stack([np.ones(n), g, t, g * t])
    else:
        X = np.column_stack([np.ones(n), t])
    Z = np.column_stack([np.ones(n), t])
    same = np.array([[a.subject_id == b.subject_id for b in obs] for a in obs], float)
    V = (Z @ np.asarray(G) @ Z.T) * same + s2 * np.eye(n)
    r = y - X @ np.asarray(beta)
    _, logdet = np.linalg.slogdet(V)
    return float(n * math.log(2 * math.pi) + logdet + r @ np.linalg.solve(V, r))


def random_observations(rng, n_subjects, max_obs, gender=True, truth=None):
    """Irregular longitudinal data; ``truth = (beta, G, s2)`` for a BT-style draw."""
    beta, G, s2 = truth or ((0.4, -0.2), np.array([[0.3, -0.02], [-0.02, 0.02]]), 0.2)
    L = np.linalg.cholesky(np.asarray(G) + 1e-12 * np.eye(2))
    out = []
    for k in range(n_subjects):
        m = int(rng.integers(1, max_obs + 1))
        b = L @ rng.standard_normal(2)
        t = np.sort(rng.uniform(0.2, 6.0, size=m))
        g = int(rng.integers(0, 2)) if gender else None
        for tj in t:
            y = beta[0] + b[0] + (beta[1] + b[1]) * tj + math.sqrt(s2) * rng.standard_normal()
            out.append(LongitudinalObservation(f"s{k:03d}", float(tj), float(y), g))
    return out
