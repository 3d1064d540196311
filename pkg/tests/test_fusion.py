import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longface.data import DataError, MatcherScores
from longface.fusion import FusionSpec, Normalization, fit_normalization, fuse_sum, sum_fuse
from longface.synthgen import clf_shaped, generate_longitudinal


@pytest.fixture(scope="module")
def ds():
    return generate_longitudinal(clf_shaped(seed=3, n_subjects=25, n_singletons=5))[0]


def test_identity_plain_sum():
    assert sum_fuse(0.3, 0.4, Normalization(), Normalization()) == pytest.approx(0.7)


def test_zscore_fixed_parameters():
    # (0.5 - 0) / 1 + (2.0 - 1) / 2
    assert sum_fuse(0.5, 2.0, Normalization(0.0, 1.0), Normalization(1.0, 2.0)) == 1.0


def test_normalization_fits():
    z = fit_normalization([1.0, 2.0, 3.0], "zscore")
    assert (z.shift, z.scale) == (2.0, 1.0)
    m = fit_normalization([1.0, 2.0, 5.0], "minmax_pooled")
    assert (m.shift, m.scale) == (1.0, 4.0)
    for method in ("zscore", "minmax"):
        with pytest.raises(DataError):
            fit_normalization([2.0, 2.0], method)


def test_spec_validation():
    assert FusionSpec("a", "b").output_label == "fused(a+b)"
    with pytest.raises(ValueError):
        FusionSpec("a", "a")
    with pytest.raises(ValueError):
        FusionSpec("a", "b", "rank")


def test_fused_matches_manual(ds):
    out = fuse_sum(ds, FusionSpec("A", "B"))
    a, b = ds.matcher("A"), ds.matcher("B")
    f = out.matcher("fused(A+B)")
    assert len(f) == len(a)
    za = (a.score - a.score.mean()) / a.score.std(ddof=1)
    zb = (b.score - b.score.mean()) / b.score.std(ddof=1)
    # both matchers were generated over the same pair list, so entries line up
    assert np.array_equal(a.probe, b.probe) and np.array_equal(a.reference, b.reference)
    np.testing.assert_allclose(f.score, za + zb, atol=1e-12)


def test_errors(ds):
    fused = fuse_sum(ds, FusionSpec("A", "B"))
    with pytest.raises(DataError, match="already present"):
        fuse_sum(fused, FusionSpec("A", "B"))
    b = ds.matcher("B")
    short = ds.with_scores("C", MatcherScores(b.probe[1:], b.reference[1:], b.score[1:]))
    with pytest.raises(DataError, match="different pairs"):
        fuse_sum(short, FusionSpec("A", "C"))
    with pytest.raises(DataError, match="unknown matcher"):
        fuse_sum(ds, FusionSpec("A", "Q"))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100), st.floats(-50, 50))
def test_zscore_affine_invariance(ds, k, c):
    b = ds.matcher("B")
    moved = ds.with_scores("B2", MatcherScores(b.probe, b.reference, k * b.score + c))
    f1 = fuse_sum(ds, FusionSpec("A", "B")).matcher("fused(A+B)").score
    f2 = fuse_sum(moved, FusionSpec("A", "B2")).matcher("fused(A+B2)").score
    np.testing.assert_allclose(f1, f2, atol=1e-10)


def test_monotone_dominance(ds):
    a = ds.matcher("A").score
    b = ds.matcher("B").score
    na, nb = fit_normalization(a, "zscore"), fit_normalization(b, "zscore")
    f = sum_fuse(a, b, na, nb)
    rng = np.random.default_rng(1)
    p, q = rng.integers(0, len(a), (2, 5000))
    dom = (na(a[p]) > na(a[q])) & (nb(b[p]) > nb(b[q]))
    assert np.all(f[p][dom] > f[q][dom])
