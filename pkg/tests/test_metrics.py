import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from helpers import brute_dir, brute_far, dense_operating_point, openset_dataset
from longface.data import Acquisition, DataError, MatcherScores, ScoreDataset, Subject
from longface.metrics import (
    BELOW_RESOLUTION,
    PROTOCOL_METADATA,
    OpenSetProtocol,
    bucket_of,
    build_roc,
    closed_set_rate,
    default_protocol,
    open_set_identify,
    operating_point,
    verification_by_elapsed_time,
)
from longface.synthgen import generate_match_scores

GEN7 = [0.9, 0.7, 0.5]
IMP7 = [0.6, 0.4, 0.2, 0.1]

scores = st.lists(st.integers(0, 12).map(lambda v: v / 4), min_size=1, max_size=40)


def test_seven_score_fixture():
    roc = build_roc(GEN7, IMP7)
    k = list(roc.thresholds).index(0.6)
    assert roc.far[k] == 0.25 and roc.tar[k] == pytest.approx(2 / 3)
    op = operating_point(roc, 0.25)
    assert (op.threshold, op.achieved_far) == (0.6, 0.25)
    assert op.tar == pytest.approx(2 / 3)


def test_perfect_separation_and_accept_all():
    roc = build_roc([1.0] * 5, [0.0] * 7)
    assert operating_point(roc, 0.001).tar == 1.0
    op = operating_point(build_roc(GEN7, IMP7), 1.0)
    assert op.tar == 1.0 and op.threshold <= min(GEN7 + IMP7)


def test_symmetric_inputs():
    s = [0.1, 0.5, 0.5, 0.9]
    roc = build_roc(s, s)
    assert np.array_equal(roc.far, roc.tar)


def test_build_roc_rejects_empty():
    with pytest.raises(ValueError):
        build_roc([], [1.0])


def test_far_below_resolution():
    op = operating_point(build_roc(GEN7, IMP7), 0.01)
    assert op.status == BELOW_RESOLUTION and op.achieved_far == 0.0
    assert op.threshold > max(IMP7)


@pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
def test_far_target_range(t):
    with pytest.raises(ValueError):
        operating_point(build_roc(GEN7, IMP7), t)


@settings(max_examples=150, deadline=None)
@given(scores, scores)
def test_roc_matches_double_loop(g, i):
    roc = build_roc(g, i)
    for t, far, tar in roc.points()[:-1]:
        assert far == brute_far(i, t)
        assert tar == sum(1 for s in g if s >= t) / len(g)


@settings(max_examples=150, deadline=None)
@given(scores, scores, st.floats(0.001, 1.0))
def test_operating_point_matches_oracle(g, i, target):
    op = operating_point(build_roc(g, i), target)
    assert (op.threshold, op.tar, op.achieved_far) == dense_operating_point(g, i, target)


@settings(max_examples=80, deadline=None)
@given(scores, scores, st.floats(0.001, 1.0), st.floats(0.001, 1.0))
def test_tar_monotone_in_far(g, i, a, b):
    roc = build_roc(g, i)
    lo, hi = sorted((a, b))
    assert operating_point(roc, lo).tar <= operating_point(roc, hi).tar


def test_gaussian_tar_oracle():
    g, i = generate_match_scores(100_000, 100_000, seed=17)
    expect = norm.cdf(3 - norm.ppf(0.999))
    assert abs(operating_point(build_roc(g, i), 0.001).tar - expect) <= 0.01
    assert expect == pytest.approx(0.464, abs=5e-4)


def test_bucket_rule():
    assert bucket_of([0.49, 0.5, 1.49, 1.5, 6.9]).tolist() == [0, 1, 1, 2, 7]


def _lapse_dataset():
    # subject k: enrollment at 5, later images at 5 + lapse
    lapses = [1.0, 1.2, 2.9, 3.1, 0.8]
    subjects = []
    for k, lp in enumerate(lapses):
        sid = f"s{k}"
        subjects.append(Subject(sid, 0, (Acquisition(f"{sid}_0", sid, 5.0), Acquisition(f"{sid}_1", sid, 5.0 + lp))))
    ds = ScoreDataset(tuple(subjects))
    P, R, S = [], [], []
    gen = [0.9, 0.6, 0.8, 0.3, 0.95]
    for k in range(5):
        P.append(2 * k + 1), R.append(2 * k), S.append(gen[k])
    imp = iter(np.linspace(0.0, 0.7, 40))
    for a in range(10):
        for b in range(a + 1, 10):
            if a // 2 != b // 2:
                P.append(b), R.append(a), S.append(float(next(imp, 0.1)))
    return ds.with_scores("M", MatcherScores(np.array(P), np.array(R), np.array(S)))


def test_verification_buckets():
    ds = _lapse_dataset()
    rows = verification_by_elapsed_time(ds, "M", [0.05], [1, 3, 5])
    by = {r["bucket_years"]: r for r in rows}
    assert by[1]["n_genuine"] == 3 and by[3]["n_genuine"] == 2
    assert by[5]["status"] == "empty_bucket" and math.isnan(by[5]["tar"])
    thr = by[1]["threshold"]
    assert by[1]["tar"] == np.mean(np.array([0.9, 0.6, 0.95]) >= thr)
    assert len({r["threshold"] for r in rows}) == 1  # one pooled impostor distribution


def test_verification_errors():
    ds = _lapse_dataset()
    with pytest.raises(DataError, match="unknown matcher"):
        verification_by_elapsed_time(ds, "nope", [0.01], [1])
    ms = ds.matcher("M")
    gm = ds.genuine_mask("M")
    only_gen = ds.with_scores("G", MatcherScores(ms.probe[gm], ms.reference[gm], ms.score[gm]))
    with pytest.raises(DataError, match="no impostor"):
        verification_by_elapsed_time(only_gen, "G", [0.01], [1])


def test_metadata_declares_conventions():
    assert ">=" in PROTOCOL_METADATA["tie_convention"]
    assert "FPIR" in PROTOCOL_METADATA["far_definition_openset"]


# -- open set ------------------------------------------------------------------


def _rows(ds, gallery, mated, nonmated, ranks, fars):
    proto = OpenSetProtocol(tuple(gallery), tuple(mated), tuple(nonmated), tuple(ranks), tuple(fars))
    return open_set_identify(ds, "M", proto)


def test_hand_fixture_3_gallery_4_probes():
    subjects = [
        Subject("a", 0, (Acquisition("a0", "a", 1), Acquisition("a1", "a", 2))),
        Subject("b", 0, (Acquisition("b0", "b", 1), Acquisition("b1", "b", 2))),
        Subject("c", 1, (Acquisition("c0", "c", 1),)),
        Subject("x", 1, (Acquisition("x0", "x", 1),)),
        Subject("y", 1, (Acquisition("y0", "y", 1),)),
    ]
    ds = ScoreDataset(tuple(subjects))
    table = {  # probe -> scores vs (a0, b0, c0)
        "a1": (0.8, 0.9, 0.1),  # mate ranks 2
        "b1": (0.2, 0.7, 0.3),  # mate ranks 1
        "x0": (0.5, 0.1, 0.2),
        "y0": (0.3, 0.75, 0.0),
    }
    P, R, S = [], [], []
    for p, vals in table.items():
        for gimg, v in zip(("a0", "b0", "c0"), vals):
            P.append(ds.image_index[p]), R.append(ds.image_index[gimg]), S.append(v)
    ds = ds.with_scores("M", MatcherScores(np.array(P), np.array(R), np.array(S)))
    gallery, mated, nonmated = ["a0", "b0", "c0"], ["a1", "b1"], ["x0", "y0"]
    rows = _rows(ds, gallery, mated, nonmated, (1, 2, 3), (0.5, 1.0, 0.01))
    got = {(r["rank"], r["far_target"]): (r["threshold"], r["dir"]) for r in rows}
    # FPIR 0.5 -> tau 0.75 (only y0 accepted): b1 mate 0.7 rejected, a1 mate 0.8 accepted at rank 2
    assert got[1, 0.5] == (0.75, 0.0) and got[2, 0.5] == (0.75, 0.5)
    # FPIR 1 accepts everything: plain closed-set rates
    assert got[1, 1.0][1] == 0.5 and got[2, 1.0][1] == 1.0
    # nothing non-mated accepted: tau above 0.75
    assert got[3, 0.01][0] > 0.75 and got[3, 0.01][1] == 0.5
    for (rank, far), (tau, d) in got.items():
        assert (tau, d) == brute_dir(ds, gallery, mated, nonmated, rank, far)


def test_perfect_separation_dir():
    rng = np.random.default_rng(0)
    ds, gallery, mated, nonmated = openset_dataset(rng, 8, 2, 6)
    ms = ds.matcher("M")
    genuine = ds.image_subject[ms.probe] == ds.image_subject[ms.reference]
    score = np.where(genuine, 1.0, rng.uniform(0, 0.1, len(ms)))
    ds = ds.with_scores("M2", MatcherScores(ms.probe, ms.reference, score))
    proto = OpenSetProtocol(tuple(gallery), tuple(mated), tuple(nonmated), (1,), (0.01, 0.2, 0.9))
    for row in open_set_identify(ds, "M2", proto):
        assert row["dir"] == 1.0 and row["threshold"] <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(0, 8))
def test_dir_matches_oracle_and_is_monotone(seed, n_gallery, n_nonmated):
    rng = np.random.default_rng(seed)
    ds, gallery, mated, nonmated = openset_dataset(rng, n_gallery, 2, n_nonmated, levels=3)
    if not mated and not nonmated:
        return
    fars = (0.1, 0.3, 1.0) if nonmated else (1.0,)
    ranks = (1, 2, len(gallery))
    rows = _rows(ds, gallery, mated, nonmated, ranks, fars)
    for r in rows:
        tau, d = brute_dir(ds, gallery, mated, nonmated, r["rank"], r["far_target"])
        assert r["threshold"] == tau
        assert r["dir"] == d or (math.isnan(d) and math.isnan(r["dir"]))
    if not mated:
        return
    table = {(r["rank"], r["far_target"]): r["dir"] for r in rows}
    for f in fars:
        assert all(table[a, f] <= table[b, f] for a, b in zip(ranks, ranks[1:]))
    for k in ranks:
        assert all(table[k, a] <= table[k, b] for a, b in zip(fars, fars[1:]))
    proto = OpenSetProtocol(tuple(gallery), tuple(mated), tuple(nonmated))
    assert table[len(gallery), 1.0] == closed_set_rate(ds, "M", proto, len(gallery))


def test_protocol_validation():
    rng = np.random.default_rng(2)
    ds, gallery, mated, nonmated = openset_dataset(rng, 4, 2, 2)
    with pytest.raises(DataError, match="disjoint"):
        _rows(ds, gallery, mated + gallery[:1], nonmated, (1,), (0.5,))
    with pytest.raises(DataError, match="has a mate"):
        _rows(ds, gallery, [], nonmated + mated[:1], (1,), (0.5,))
    with pytest.raises(DataError, match="undefined"):
        _rows(ds, gallery, mated, [], (1,), (0.5,))


def test_missing_probe_gallery_score():
    rng = np.random.default_rng(3)
    ds, gallery, mated, nonmated = openset_dataset(rng, 4, 2, 2)
    ms = ds.matcher("M")
    ds = ds.with_scores("short", MatcherScores(ms.probe[1:], ms.reference[1:], ms.score[1:]))
    proto = OpenSetProtocol(tuple(gallery), tuple(mated), tuple(nonmated))
    with pytest.raises(DataError, match="no score"):
        open_set_identify(ds, "short", proto)


def test_default_protocol_lapse_filter():
    ds = _lapse_dataset()
    proto = default_protocol(ds, lapse_bucket=3)
    assert sorted(proto.mated_probes) == ["s2_1", "s3_1"]
    assert len(proto.gallery) == 5 and proto.nonmated_probes == ()
