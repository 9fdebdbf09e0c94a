import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from conftest import micro_config, micro_study
from sdfholo import tensorcore as tc
from sdfholo.errors import ConfigurationError, ContractViolation
from sdfholo.losses import (
    LossWeights,
    loss_anchor,
    loss_gac,
    loss_lm,
    loss_mim,
    loss_total,
    study_batch_losses,
)
from sdfholo.model import SDFHolo, sample_study_masks


def unit(v):
    v = np.asarray(v, dtype=float)
    return tc.Tensor(v / np.linalg.norm(v))


# ---- MIM ----------------------------------------------------------------------


def test_mim_examples():
    y = np.random.default_rng(0).normal(size=(4, 4096))
    m = [1, 3]
    assert loss_mim(tc.Tensor(y), tc.Tensor(y), y, y, m).item() == 0.0
    assert loss_mim(tc.Tensor(y + 1), tc.Tensor(y), y, y, m).item() == pytest.approx(1.0)
    assert loss_mim(tc.Tensor(y), tc.Tensor(y + 1), y, y, m).item() == pytest.approx(3.0)
    # unmasked rows do not count
    y2 = y.copy()
    y2[0] += 100
    assert loss_mim(tc.Tensor(y2), tc.Tensor(y), y, y, m).item() == 0.0


def test_mim_empty_mask_and_shape():
    y = np.zeros((2, 4096))
    with pytest.raises(ContractViolation):
        loss_mim(tc.Tensor(y), tc.Tensor(y), y, y, [])
    with pytest.raises(ContractViolation):
        loss_mim(tc.Tensor(np.zeros((2, 8))), tc.Tensor(y), y, y, [0])


def test_mim_pools_regions_by_voxel_count():
    a, b = np.zeros((3, 4096)), np.zeros((5, 4096))
    loss = loss_mim([tc.Tensor(a + 1), tc.Tensor(b)], [tc.Tensor(a), tc.Tensor(b)], [a, b], [a, b],
                    [[0], [0, 1, 2]])
    assert loss.item() == pytest.approx(1 / 4)
    s = loss_mim([tc.Tensor(a + 1), tc.Tensor(b)], [tc.Tensor(a), tc.Tensor(b)], [a, b], [a, b],
                 [[0], [0, 1, 2]], reduction="sum")
    assert s.item() == pytest.approx(4096)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mim_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(6, 4096)), rng.normal(size=(6, 4096))
    m = rng.permutation(6)[:4]
    a = loss_mim(tc.Tensor(x), tc.Tensor(x), y, y, m).item()
    b = loss_mim(tc.Tensor(x), tc.Tensor(x), y, y, m[::-1]).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_mim_gradient():
    rng = np.random.default_rng(1)
    xc, xp = tc.parameter(rng.normal(size=(3, 4096))), tc.parameter(rng.normal(size=(3, 4096)))
    y = rng.normal(size=(3, 4096))
    assert tc.grad_check(lambda a, b: loss_mim(a, b, y, y, [0, 2]), [xc, xp], max_coords=50) <= 1e-4


# ---- LM and GAC -----------------------------------------------------------------


def test_lm_examples():
    logits = np.full((3, 4), -1e3)
    t = [0, 2, 1]
    logits[np.arange(3), t] = 0.0
    assert loss_lm(tc.Tensor(logits), t).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_lm(tc.Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0]).item() == pytest.approx(math.log(4), abs=1e-15)
    assert loss_lm(tc.Tensor(np.zeros((5, 4))), [0] * 5, reduction="sum").item() == pytest.approx(5 * math.log(4))
    with pytest.raises(ContractViolation):
        loss_lm(tc.Tensor(np.zeros((3, 4))), [0, 1])


def test_gac_examples():
    ids = list(range(6))
    perfect = [tc.Tensor(np.where(np.arange(6) == r, 0.0, -1e3)) for r in ids]
    assert loss_gac(perfect, ids).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_gac([tc.Tensor(np.zeros(6))] * 6, ids).item() == pytest.approx(math.log(6), abs=1e-15)


def test_lm_gac_gradients():
    rng = np.random.default_rng(2)
    x = tc.parameter(rng.normal(size=(4, 7)))
    assert tc.grad_check(lambda x: loss_lm(x, [1, 0, 6, 3]), [x]) <= 1e-4
    rows = [tc.parameter(rng.normal(size=6)) for _ in range(3)]
    assert tc.grad_check(lambda *r: loss_gac(list(r), [0, 4, 2]), rows) <= 1e-4


# ---- anchor -------------------------------------------------------------------


def test_anchor_single_pair_is_zero():
    v = {3: unit([1, 2, 3])}
    loss, n = loss_anchor(v, {3: unit([3, 2, 1])}, 0.1)
    assert n == 1 and loss.item() == pytest.approx(0.0, abs=1e-15)


def test_anchor_orthogonal_pairs_closed_form():
    v = {1: unit([1, 0]), 2: unit([0, 1])}
    loss, n = loss_anchor(v, dict(v), tau=1.0)
    assert n == 2
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert loss.item() == pytest.approx(0.3133, abs=5e-5)


def test_anchor_skips_unmatched_and_warns(caplog):
    with caplog.at_level(logging.WARNING):
        loss, n = loss_anchor({1: unit([1, 0])}, {2: unit([0, 1])}, 0.1)
    assert n == 0 and loss.item() == 0.0
    assert "skipped" in caplog.text
    # unmatched text anchors still act as negatives
    loss, n = loss_anchor({1: unit([1, 0])}, {1: unit([1, 0]), 2: unit([0, 1])}, 1.0)
    assert n == 1 and loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)))


def test_anchor_gradient_three_pairs():
    rng = np.random.default_rng(3)
    raw_v = [tc.parameter(rng.normal(size=5)) for _ in range(3)]
    raw_t = [tc.parameter(rng.normal(size=5)) for _ in range(3)]

    def f(*ps):
        v = {c: tc.l2_normalize(p) for c, p in enumerate(ps[:3])}
        t = {c: tc.l2_normalize(p) for c, p in enumerate(ps[3:])}
        return loss_anchor(v, t, 0.1)[0]
    assert tc.grad_check(f, raw_v + raw_t) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_anchor_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    q = special_ortho_group.rvs(6, random_state=seed % (2**32 - 1))
    v = {c: unit(rng.normal(size=6)) for c in range(4)}
    t = {c: unit(rng.normal(size=6)) for c in range(1, 5)}
    a = loss_anchor(v, t, 0.1)[0].item()
    b = loss_anchor({c: tc.Tensor(q @ x.data) for c, x in v.items()},
                    {c: tc.Tensor(q @ x.data) for c, x in t.items()}, 0.1)[0].item()
    assert a == pytest.approx(b, rel=1e-10)


def test_anchor_bad_temperature():
    with pytest.raises(ConfigurationError):
        loss_anchor({}, {}, 0.0)


# ---- total --------------------------------------------------------------------


def test_total_examples():
    w = LossWeights()
    assert w.lambdas == (1.0, 1.0, 0.1, 0.5) and w.omega_pet == 3.0
    assert loss_total((2.0, 1.0, 0.5, 0.4), w) == pytest.approx(3.25, abs=1e-15)
    assert loss_total((0.0, 0.0, 0.0, 0.0), w) == 0.0
    assert loss_total((2.0, 1.0, 0.5, 0.4), LossWeights(0, 0, 0, 0)) == 0.0
    with pytest.raises(ConfigurationError):
        LossWeights(mim=-1.0)


def test_study_batch_report_recomposes():
    model = SDFHolo(micro_config(regions=2), seed=2)
    preps = []
    for seed in range(2):
        base = micro_study(seed=seed, n_patches=4, classes=(3, 5, 3, 5))
        other = micro_study(seed=seed + 10, n_patches=4, classes=(5, 5, 3, 3)).regions[0]
        other.index = 1
        base.regions.append(other)
        preps.append(base)
    masks = [sample_study_masks(p, 0.5, 0, 0, i) for i, p in enumerate(preps)]
    outs = [model.forward_study(p, m) for p, m in zip(preps, masks)]
    w = LossWeights()
    total, terms, rep = study_batch_losses(outs, preps, masks, w, 0.1)
    assert abs(rep.total - rep.recomposed(w)) <= 1e-12
    assert rep.counts["regions"] == 4 and rep.counts["masked_voxels"] == 4 * 2 * 4096
    assert rep.counts["lm_tokens"] == 2 * (len(preps[0].tokens) - 1)
    assert set(rep.to_json()) >= {"L_MIM", "L_LM", "L_GAC", "L_A", "L_total"}
    # two-study micro-batch gradient check on the total
    for g in model.encoder.cmim:
        g.gate_ct.data, g.gate_pet.data = np.array(0.3), np.array(0.2)

    def f(*_):
        o = [model.forward_study(p, m) for p, m in zip(preps, masks)]
        return study_batch_losses(o, preps, masks, w, 0.1)[0]
    assert tc.grad_check(f, model.parameters(), max_coords=2, seed=5) <= 1e-4
