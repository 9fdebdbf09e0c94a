import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfholo.errors import ConfigurationError, ConsistencyError, ContractViolation, DomainError
from sdfholo.evalmetrics import (
    REPORT_COLUMNS,
    BinaryMask,
    bleu_score,
    bleu_n,
    clipped_precision,
    dsc,
    fnv,
    fpv,
    gaussian_importance,
    lcs_length,
    report_scores,
    rouge_l,
    score_table,
    seg_scores,
    sliding_window_infer,
    sliding_window_probabilities,
    table_csv,
    window_starts,
)


def empty(shape=(6, 6, 6)):
    return np.zeros(shape, bool)


# ---- segmentation -------------------------------------------------------------


def test_dsc_examples():
    a = empty()
    a[1, 1, 1:3] = True
    b = empty()
    b[1, 1, 2:4] = True
    assert dsc(a, a) == 1.0
    c = empty()
    c[4, 4, 4] = True
    assert dsc(a, c) == 0.0
    assert dsc(a, b) == 0.5
    assert dsc(empty(), empty()) == 1.0
    with pytest.raises(ConsistencyError):
        dsc(a, empty((6, 6, 5)))


def test_fnv_two_components():
    gt = np.zeros((12, 12, 12), bool)
    gt[1, 1, 1:6] = True  # 5 ml at 10 mm voxels
    gt[8, 8, 5:8] = True  # 3 ml
    pred = empty((12, 12, 12))
    pred[1, 1, 3] = True
    sp = (10.0, 10.0, 10.0)
    assert fnv(pred, gt, sp) == pytest.approx(3.0)
    assert fnv(gt, gt, sp) == 0.0
    assert fnv(empty((12, 12, 12)), gt, sp) == pytest.approx(8.0)
    # spacing may ride on the masks themselves
    assert fnv(BinaryMask(pred, sp), BinaryMask(gt, sp)) == pytest.approx(3.0)


def test_fpv_examples():
    gt = empty()
    gt[1:4, 1:4, 1:4] = True
    assert fpv(empty(), gt) == 0.0
    inside = empty()
    inside[2, 2, 2] = True
    assert fpv(inside, gt) == 0.0
    spur = inside.copy()
    spur[5, 5, 4:6] = True
    assert fpv(spur, gt, (1, 1, 1)) == pytest.approx(0.002)


def test_connectivity_configurable():
    gt = empty()
    gt[0, 0, 0] = gt[1, 1, 1] = True
    pred = empty()
    pred[0, 0, 0] = True
    assert fnv(pred, gt, (10, 10, 10)) == 0.0  # diagonal neighbours form one component
    assert fnv(pred, gt, (10, 10, 10), connectivity=6) == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        fnv(pred, gt, connectivity=8)


def test_perfect_and_both_empty_scores():
    gt = empty()
    gt[2:4, 2:4, 2:4] = True
    s = seg_scores(gt, gt)
    assert (s.dsc, s.fnv, s.fpv) == (1.0, 0.0, 0.0) and s.flags == []
    assert seg_scores(empty(), empty()).flags == ["both_empty"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_symmetry_duality_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((7, 7, 7)) < 0.1
    g = rng.random((7, 7, 7)) < 0.1
    assert dsc(p, g) == dsc(g, p)
    assert fnv(p, g) == fpv(g, p)
    missing = np.argwhere(g & ~p)
    if len(missing):
        q = p.copy()
        q[tuple(missing[0])] = True
        assert dsc(q, g) >= dsc(p, g)
        assert fnv(q, g) <= fnv(p, g)


def test_binary_mask_requires_3d():
    with pytest.raises(ConsistencyError):
        BinaryMask(np.zeros((3, 3)))
    assert BinaryMask(empty(), (2, 2, 2)).voxel_ml == pytest.approx(0.008)


# ---- sliding window -----------------------------------------------------------


def test_window_starts_clamped():
    assert window_starts(8, 8, 4) == [0]
    assert window_starts(10, 8, 4) == [0, 2]
    assert window_starts(16, 8, 4) == [0, 4, 8]
    with pytest.raises(ContractViolation):
        window_starts(7, 8, 4)


def test_single_window_passes_through():
    rng = np.random.default_rng(0)
    ct, pet = rng.normal(size=(8, 8, 8)), rng.random((8, 8, 8))
    calls = []

    def pred(c, p):
        calls.append(c.shape)
        return p
    out = sliding_window_probabilities(pred, ct, pet, window=8)
    assert calls == [(8, 8, 8)] and np.array_equal(out, pet)


@settings(max_examples=20, deadline=None)
@given(st.tuples(*[st.integers(8, 21)] * 3))
def test_every_voxel_covered(dims):
    ct = np.zeros(dims)
    # an uncovered voxel would divide 0 by 0
    out = sliding_window_probabilities(lambda c, p: np.ones(c.shape), ct, ct, window=8)
    assert np.all(out == 1.0)
    for axis in range(3):
        starts = window_starts(dims[axis], 8, 4)
        covered = np.zeros(dims[axis], bool)
        for s in starts:
            covered[s:s + 8] = True
        assert covered.all()


def test_threshold_and_shape_contract():
    ct = np.zeros((12, 12, 12))
    m = sliding_window_infer(lambda c, p: np.full(c.shape, 0.5), ct, ct, window=8, spacing=(2, 2, 2))
    assert m.mask.all() and m.spacing == (2.0, 2.0, 2.0)
    m = sliding_window_infer(lambda c, p: np.full(c.shape, 0.4999), ct, ct, window=8)
    assert not m.mask.any()
    with pytest.raises(ContractViolation):
        sliding_window_probabilities(lambda c, p: np.zeros((4, 4, 4)), ct, ct, window=8)
    with pytest.raises(ConsistencyError):
        sliding_window_probabilities(lambda c, p: c, ct, np.zeros((12, 12, 11)), window=8)
    with pytest.raises(ConfigurationError):
        sliding_window_probabilities(lambda c, p: c, ct, ct, window=8, overlap=1.0)


def test_gaussian_weighting_is_seam_free_for_constants():
    g = gaussian_importance((8, 8, 8))
    assert g.max() == 1.0 and g.min() > 0
    ct = np.zeros((20, 13, 17))
    out = sliding_window_probabilities(lambda c, p: np.full(c.shape, 0.3), ct, ct, window=8,
                                       weighting="gaussian")
    assert np.max(np.abs(out - 0.3)) < 1e-12


# ---- text ----------------------------------------------------------------------


def test_bleu_examples():
    s = "the liver shows normal uptake ."
    assert all(bleu_n(s, s, n) == 1.0 for n in range(1, 5))
    assert clipped_precision("a a a", "a b", 1) == (1, 3)
    assert bleu_n("x y z w", "a b c d", 4) == 0.0
    assert bleu_score("", "a b").flags == ["empty_candidate"]
    with pytest.raises(DomainError):
        bleu_n("a", "a", 5)


def test_bleu_smoothing_flagged():
    sc = bleu_score("a b c d", "a b x d", 4)
    assert "smoothed_3" in sc.flags and 0 < sc.value < 1
    # BLEU-1 with brevity penalty: one matching unigram, c=1, r=2
    assert bleu_n("a", "a b", 1) == pytest.approx(np.exp(1 - 2))


def test_rouge_examples():
    assert rouge_l("a b c", "a b c") == pytest.approx(1.0)
    assert rouge_l("x y", "a b c") == 0.0
    assert lcs_length("a c", "a b c") == 2
    p, r, b = 1.0, 2 / 3, 1.2
    assert rouge_l("a c", "a b c") == pytest.approx((1 + b * b) * p * r / (r + b * b * p))
    assert rouge_l("", "a") == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=8), st.lists(st.sampled_from("abcde"), max_size=8))
def test_text_scores_bounded(c, r):
    for v in report_scores(c, r).values():
        assert 0.0 <= v <= 1.0


# ---- tables -----------------------------------------------------------------------


def test_score_table_and_csv():
    rows = [dict(method="m", dsc=0.5, fnv=1.0, fpv=0.0), dict(method="m", dsc=0.7, fnv=3.0, fpv=2.0),
            dict(method="n", dsc=0.9, fnv=0.0, fpv=0.1)]
    t = score_table(rows)
    assert t[0] == dict(method="m", dsc=pytest.approx(0.6), fnv=2.0, fpv=1.0)
    assert score_table(rows[2:])[0] == rows[2]
    text = table_csv(t)
    assert text.splitlines()[0] == "method,dsc,fnv,fpv"
    assert text.splitlines()[1] == "m,0.6000,2.0000,1.0000"
    with pytest.raises(DomainError):
        score_table([])


def test_report_table_marks_absent_columns():
    row = dict(method="m", **report_scores("a b c", "a b c"))
    text = table_csv(score_table([row], REPORT_COLUMNS), REPORT_COLUMNS)
    assert text.splitlines()[1] == "m,1.0000,1.0000,1.0000,1.0000,n/a,1.0000,n/a"
