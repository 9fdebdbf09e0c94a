import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import micro_config, micro_study
from sdfholo import tensorcore as tc
from sdfholo.errors import (
    CheckpointVersionError,
    ConfigurationError,
    ContractViolation,
    CorruptFileError,
    DegenerateMaskError,
)
from sdfholo.model import (
    ModelConfig,
    SDFHolo,
    dominant_classes,
    load_checkpoint,
    mask_count,
    merge_regional_anchors,
    normalize_ct,
    normalize_pet,
    patchify,
    prepare_study,
    read_checkpoint,
    sample_mask,
    save_checkpoint,
)
from sdfholo.model.layers import sincos_3d
from sdfholo.synthio import default_vocabulary

# ---- configuration and tokens -------------------------------------------------


def test_default_config_matches_desk_scale():
    cfg = ModelConfig()
    assert (cfg.embed_dim, cfg.heads, cfg.depth, cfg.decoder_depth, cfg.gaa_depth) == (64, 4, 6, 2, 2)
    assert cfg.mask_ratio == 0.9 and cfg.temperature == 0.1 and cfg.patch_size == 16
    assert cfg.cmim_blocks() == (2, 4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [dict(embed_dim=30, heads=4), dict(mask_ratio=1.0), dict(temperature=0.0),
                                 dict(cmim_depths=(0.5, 0.5)), dict(cmim_depths=(0.0,))])
def test_config_invariants(bad):
    with pytest.raises(ConfigurationError):
        ModelConfig(**bad).validate()


def test_patchify_examples():
    p, c = patchify(np.zeros((16, 16, 16)))
    assert p.shape == (1, 4096) and c.tolist() == [[0, 0, 0]]
    vol = np.zeros((32, 16, 16))
    vol[16:] = 1.0
    p, c = patchify(vol)
    assert c.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert not p[0].any() and p[1].all()
    with pytest.raises(ContractViolation):
        patchify(np.zeros((20, 16, 16)))


def test_dominant_class_rules():
    lab = np.zeros((16, 16, 16), int)
    lab[:8], lab[8:] = 5, 3
    assert dominant_classes(lab).tolist() == [3]
    lab[:8] = 0
    assert dominant_classes(lab).tolist() == [3]  # background tied, not a strict majority
    lab[:9] = 0
    assert dominant_classes(lab).tolist() == [0]


def test_normalisation_bounds():
    assert normalize_ct([-2000, -1000, 0, 1000, 3000]).tolist() == [-1, -1, 0, 1, 1]
    assert normalize_pet([0, 5, 10, 50]).tolist() == [0, 1, 2, 2]


def test_sample_mask_default_ratio_and_determinism():
    vis, msk = sample_mask(100, 0.9, 3)
    assert len(msk) == 90 and len(vis) == 10
    assert np.array_equal(sample_mask(100, 0.9, 3)[0], vis)
    assert not np.array_equal(sample_mask(100, 0.9, 4)[0], vis)
    with pytest.raises(DegenerateMaskError):
        sample_mask(5, 0.05, 0)
    with pytest.raises(DegenerateMaskError):
        sample_mask(1, 0.5, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 400), st.floats(0.05, 0.95))
def test_mask_partition_property(n, p):
    m = mask_count(n, p)
    if m in (0, n):
        return
    vis, msk = sample_mask(n, p, 1, n)
    assert len(msk) == m
    assert np.array_equal(np.sort(np.concatenate([vis, msk])), np.arange(n))


# ---- network pieces -----------------------------------------------------------


def test_embed_tokens_examples(micro_model):
    d = micro_model.config.embed_dim
    coords = np.array([[0, 0, 0], [1, 2, 3]])
    z = micro_model.embed_tokens(np.zeros((2, 4096)), coords, "CT").data
    assert np.allclose(z, sincos_3d(coords, d) + micro_model.proj_ct.bias.data)
    patches = np.random.default_rng(0).normal(size=(2, 4096))
    a = micro_model.embed_tokens(patches, coords, "PET").data
    b = micro_model.embed_tokens(patches[::-1], coords[::-1], "PET").data
    assert np.allclose(a[::-1], b)


def test_gate_zero_isolation_and_cross_flow(micro_model):
    rng = np.random.default_rng(1)
    z_ct, z_pet = tc.Tensor(rng.normal(size=(5, 16))), tc.Tensor(rng.normal(size=(5, 16)))
    f_ct, f_pet = micro_model.encode_dual(z_ct, z_pet)
    assert np.array_equal(f_pet.data, micro_model.encode_single(z_pet, "PET").data)
    # once the gate opens, the PET output depends on the CT input
    for g in micro_model.encoder.cmim:
        g.gate_pet.data = np.array(0.5)
    x = tc.parameter(z_ct.data.copy())
    w = rng.normal(size=(5, 16))  # a plain sum of layer-normed rows is constant
    err = tc.grad_check(lambda x: tc.sum(micro_model.encode_dual(x, z_pet)[1] * w), [x])
    x.grad = None
    tc.sum(micro_model.encode_dual(x, z_pet)[1] * w).backward()
    assert np.abs(x.grad).max() > 1e-6 and err <= 1e-4


def test_encode_dual_token_mismatch(micro_model):
    with pytest.raises(ContractViolation):
        micro_model.encode_dual(tc.Tensor(np.zeros((3, 16))), tc.Tensor(np.zeros((4, 16))))


def test_encode_dual_permutation_equivariant(micro_model):
    for g in micro_model.encoder.cmim:
        g.gate_ct.data, g.gate_pet.data = np.array(0.3), np.array(-0.2)
    rng = np.random.default_rng(2)
    zc, zp = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
    perm = rng.permutation(6)
    a = micro_model.encode_dual(tc.Tensor(zc), tc.Tensor(zp))
    b = micro_model.encode_dual(tc.Tensor(zc[perm]), tc.Tensor(zp[perm]))
    assert np.allclose(a[0].data[perm], b[0].data, atol=1e-12)
    assert np.allclose(a[1].data[perm], b[1].data, atol=1e-12)


def test_fuse_streams(micro_model):
    f_ct, f_pet = tc.Tensor(np.ones((2, 16))), tc.Tensor(np.full((2, 16), 4.0))
    assert np.allclose(micro_model.fuse_streams(f_ct, f_pet).data, 3.0)
    micro_model.fusion_logit.data = np.array(-800.0)
    assert np.array_equal(micro_model.fuse_streams(f_ct, f_pet).data, f_ct.data)
    micro_model.fusion_logit.data = np.array(0.3)
    w = micro_model.fusion_logit
    assert tc.grad_check(lambda w: tc.sum(micro_model.fuse_streams(f_ct, f_pet)), [w]) <= 1e-6


def test_visual_anchor_pooling():
    f = tc.Tensor(np.array([[3.0, 4.0], [1.0, 0.0], [3.0, 4.0]]))
    v = SDFHolo.pool_visual_anchor(f, np.array([7, 2, 7]), 7)
    assert np.allclose(v.data, [0.6, 0.8])
    assert SDFHolo.pool_visual_anchor(f, np.array([7, 2, 7]), 9) is None
    one = SDFHolo.pool_visual_anchor(tc.Tensor(f.data[:1]), np.array([7]), 7)
    assert np.allclose(one.data, v.data)


def test_text_encoding_and_anchor(micro_model):
    ids = np.array([1, 7, 8, 9, 2])
    text = micro_model.encode_text(ids, {4: [(2, 3)], 5: [(1, 2), (3, 4)]})
    assert text.e_text.shape == (5, 16)
    t = SDFHolo.pool_text_anchor(text, 4)
    e = text.e_text.data
    assert np.allclose(t.data, e[2] / np.linalg.norm(e[2]))
    both = SDFHolo.pool_text_anchor(text, 5).data
    ref = (e[1] + e[3]) / 2
    assert np.allclose(both, ref / np.linalg.norm(ref))
    assert SDFHolo.pool_text_anchor(text, 6) is None
    assert micro_model.encode_text([], {}).spans == {}


def test_inject_text(micro_model):
    rng = np.random.default_rng(3)
    f_vis = tc.Tensor(rng.normal(size=(4, 16)))
    assert micro_model.inject_text(f_vis, None) is f_vis
    e_text = tc.parameter(rng.normal(size=(6, 16)))
    micro_model.inject_text(f_vis, e_text)
    w = micro_model.text_inject.last_weights
    assert w.shape == (2, 4, 6) and np.allclose(w.sum(axis=-1), 1.0)
    err = tc.grad_check(lambda e: tc.sum(micro_model.inject_text(f_vis, e) ** 2.0), [e_text])
    assert err <= 1e-4 and np.abs(e_text.grad).max() > 0


def test_aggregate_global_init_and_order():
    model = SDFHolo(micro_config(regions=3), seed=1)
    rng = np.random.default_rng(4)
    parts = [tc.Tensor(rng.normal(size=(1, 16))) for _ in range(3)]
    g = model.aggregate_global(parts)
    assert g.s_global.shape == (3, 16)
    expect = np.mean([p.data[0] for p in parts], axis=0) + model.anatomy_embed.data.mean(axis=0)
    assert np.allclose(g.f_whole.data, expect)
    for b in model.gaa_blocks:
        b.scale.data = np.array(0.7)
    g1 = model.aggregate_global(parts).f_whole.data
    g2 = model.aggregate_global(parts[::-1]).f_whole.data
    assert not np.allclose(g1, g2)
    with pytest.raises(ContractViolation):
        model.aggregate_global(parts[:2])


def test_decode_mim_shapes_and_positions(micro_model):
    rng = np.random.default_rng(5)
    coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    f_vis = tc.Tensor(rng.normal(size=(1, 16)))
    st = micro_model.decode_mim(f_vis, np.array([2]), np.array([0, 1, 3]), coords)
    assert st.h_dec.shape == (4, 16) and st.x_ct.shape == (4, 4096) and st.x_pet.shape == (4, 4096)
    assert not np.allclose(st.x_ct.data[0], st.x_ct.data[1])
    full = micro_model.decode_mim(tc.Tensor(rng.normal(size=(4, 16))), np.arange(4), np.zeros(0, int), coords)
    assert np.all(np.isfinite(full.x_pet.data))
    with pytest.raises(ContractViolation):
        micro_model.decode_mim(f_vis, np.array([1]), np.array([1, 2, 3]), coords)


def test_language_decoder(micro_model):
    rng = np.random.default_rng(6)
    mem = tc.Tensor(rng.normal(size=(3, 16)))
    dist = micro_model.next_token_distribution(mem, [1, 5, 6, 7])
    assert dist.shape == (4, 32)
    assert np.max(np.abs(dist.sum(axis=-1) - 1.0)) <= 1e-12
    changed = micro_model.next_token_distribution(mem, [1, 5, 9, 7])
    assert np.array_equal(dist[:2], changed[:2]) and not np.allclose(dist[2], changed[2])
    g1 = micro_model.generate(mem, 1, 2, max_len=12)
    assert g1 == micro_model.generate(mem, 1, 2, max_len=12)
    assert g1[0] == 1 and len(g1) <= 12
    with pytest.raises(ContractViolation):
        micro_model.decode_lm(mem, [])


def test_classify_region_shape():
    model = SDFHolo(micro_config(regions=6), seed=0)
    logits = model.classify_region(tc.Tensor(np.ones((3, 16))))
    assert logits.shape == (6,)
    assert tc.softmax(logits).data.sum() == pytest.approx(1.0)


def test_forward_study_outputs(micro_model):
    prep = micro_study()
    out = micro_model.forward_study(prep, None)
    for a in list(out.visual_anchors.values()) + list(out.text_anchors.values()):
        assert abs(np.linalg.norm(a.data) - 1.0) <= 1e-9
    assert set(out.visual_anchors) == {3, 5}
    assert set(out.text_anchors) == {3, 5, 9}
    assert out.lm_logits.shape == (len(prep.tokens) - 1, 32)
    assert out.regions[0].decoder is None


def test_merge_regional_anchors():
    a = tc.Tensor([1.0, 0.0])
    b = tc.Tensor([0.0, 1.0])
    merged = merge_regional_anchors([{1: a}, {1: b, 2: b}])
    assert np.allclose(merged[1].data, [np.sqrt(0.5), np.sqrt(0.5)])
    assert np.allclose(merged[2].data, [0.0, 1.0])


def test_prepare_study_on_phantom(phantom):
    prep = prepare_study(phantom)
    assert len(prep.regions) == 6
    assert all(r.ct.shape[1] == 4096 and r.ct.min() >= -1 and r.ct.max() <= 1 for r in prep.regions)
    assert all(r.pet.min() >= 0 and r.pet.max() <= 2 for r in prep.regions)
    vocab = default_vocabulary()
    for c, spans in prep.spans.items():
        for s, e in spans:
            assert 1 <= s < e <= len(prep.tokens) - 1
            assert prep.tokens[s] != vocab.unk
    assert prep.tokens[0] == vocab.bos and prep.tokens[-1] == vocab.eos


# ---- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, micro_model):
    micro_model.encoder.cmim[0].gate_ct.data = np.array(0.25)
    save_checkpoint(micro_model, tmp_path / "m.ckpt", extra={"step": 3})
    model, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"step": 3}
    assert model.config == micro_model.config
    for p, q in zip(micro_model.parameters(), model.parameters()):
        assert p.data.shape == q.data.shape and np.array_equal(p.data, q.data)


def test_checkpoint_corruption(tmp_path, micro_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(micro_model, path)
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-16])
    with pytest.raises(CorruptFileError):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CorruptFileError):
        read_checkpoint(tmp_path / "magic.ckpt")
    bumped = bytearray(raw)
    bumped[8] = 99
    (tmp_path / "v.ckpt").write_bytes(bytes(bumped))
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(tmp_path / "v.ckpt")
