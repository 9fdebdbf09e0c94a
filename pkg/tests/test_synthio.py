import json

import numpy as np
import pytest

from sdfholo import anatomy
from sdfholo.errors import ConfigurationError, ConsistencyError, CorruptFileError
from sdfholo.synthio import (
    EffectModel,
    MaskVolume,
    Report,
    Study,
    Volume,
    default_phantom_config,
    default_vocabulary,
    detokenize,
    generate_phantom,
    load_study,
    make_cohort,
    mention_spans,
    save_study,
    tokenize,
)
from sdfholo.synthio.phantom import COHORT_STRATA
from sdfholo.synthio.text import default_lexicon, normalize, words

SMALL = dict(dims=(32, 32, 96), spacing=(6.0, 6.0, 10.0))


def random_study(seed=0, dims=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    sp = (1.5, 1.5, 2.0)
    return Study(
        ct=Volume(rng.normal(size=dims) * 300, sp, "CT"),
        pet=Volume(rng.gamma(2.0, size=dims), sp, "PET"),
        mask=MaskVolume(rng.integers(0, 181, size=dims), sp),
        report=Report("the liver shows normal uptake .", [1, 2, 3]),
        subject_age=33.0,
    )


def test_round_trip_random_study(tmp_path):
    s = random_study()
    save_study(s, tmp_path)
    back = load_study(tmp_path)
    assert np.array_equal(back.ct.values, s.ct.values)
    assert np.array_equal(back.pet.values, s.pet.values)
    assert np.array_equal(back.mask.labels, s.mask.labels)
    assert back.report == s.report and back.subject_age == 33.0


def test_layout_and_header(tmp_path):
    save_study(random_study(), tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"ct.raw", "pet.raw", "mask.raw", "ct.json", "pet.json", "mask.json",
            "report.json", "meta.json"} <= names
    header = json.loads((tmp_path / "mask.json").read_text())
    assert header["dtype"] == "uint16" and header["byte_order"] == "little"
    assert (tmp_path / "ct.raw").stat().st_size == 8 ** 3 * 4


def test_truncated_payload(tmp_path):
    save_study(random_study(), tmp_path)
    raw = (tmp_path / "pet.raw").read_bytes()
    (tmp_path / "pet.raw").write_bytes(raw[:-8])
    with pytest.raises(CorruptFileError):
        load_study(tmp_path)


def test_header_dims_vs_payload(tmp_path):
    save_study(random_study(dims=(4, 4, 4)), tmp_path)
    raw = (tmp_path / "ct.raw").read_bytes()
    (tmp_path / "ct.raw").write_bytes(raw + raw[:4])  # 65 values
    with pytest.raises(ConsistencyError):
        load_study(tmp_path)


def test_grid_disagreement_rejected():
    s = random_study()
    with pytest.raises(ConsistencyError):
        Study(s.ct, Volume(np.ones((8, 8, 4)), s.spacing, "PET"), s.mask, s.report, 30.0)
    with pytest.raises(ConsistencyError):
        Volume(-np.ones((2, 2, 2)), (1, 1, 1), "PET")


def test_phantom_determinism():
    cfg = default_phantom_config(**SMALL)
    a, b = generate_phantom(7, cfg), generate_phantom(7, cfg)
    assert a.ct.values.tobytes() == b.ct.values.tobytes()
    assert a.pet.values.tobytes() == b.pet.values.tobytes()
    assert a.report == b.report
    c = generate_phantom(8, cfg)
    assert not np.array_equal(a.pet.values, c.pet.values)


def test_phantom_grid_consistency(phantom):
    assert phantom.ct.dims == phantom.pet.dims == phantom.mask.dims == phantom.lesion.dims
    assert phantom.pet.values.min() >= 0


def test_dims_not_multiple_of_patch():
    with pytest.raises(ConfigurationError):
        generate_phantom(0, default_phantom_config(dims=(30, 32, 96)))


def test_liver_lesion_sentence():
    cfg = default_phantom_config(
        dims=(32, 32, 32), spacing=(4, 4, 4),
        organs=[dict(organ="liver", center=(0.5, 0.5, 0.5), radii=(0.3, 0.3, 0.3), ct=55, suv=2.0),
                dict(organ="spleen", center=(0.5, 0.5, 0.1), radii=(0.1, 0.1, 0.05), ct=45, suv=2.0)],
        lesions=[dict(organ="liver", amplitude=5.0)])
    s = generate_phantom(3, cfg)
    term = default_lexicon().primary_term(anatomy.CLASS_IDS["liver"])
    lesion_sentences = [x for x in s.report.text.split(" .") if "lesion" in x]
    assert len(lesion_sentences) == 1
    assert lesion_sentences[0].count(term) == 1
    assert s.lesion.labels.any()


def test_zero_amplitude_lesion_leaves_baseline():
    cfg = default_phantom_config(**SMALL, lesions=[dict(organ="liver", amplitude=0.0)])
    s = generate_phantom(5, cfg)
    liver = s.mask.labels == anatomy.CLASS_IDS["liver"]
    n = int(liver.sum())
    mean = float(s.pet.values[liver].mean())
    assert abs(mean - 2.2) <= 3 * cfg.pet_noise / np.sqrt(n)
    assert "lesion" not in s.report.text


def test_tokenize_examples():
    v = default_vocabulary()
    assert tokenize("", v) == [v.bos, v.eos]
    ids = tokenize("the liver shows zorblax uptake", v)
    assert ids.count(v.unk) == 1
    s = generate_phantom(0, default_phantom_config(**SMALL))
    assert detokenize(tokenize(s.report.text, v), v) == normalize(s.report.text)


def test_mention_spans_liver():
    lex = default_lexicon()
    ws = words("the liver shows normal uptake .")
    assert mention_spans(ws, lex) == {anatomy.CLASS_IDS["liver"]: [(1, 2)]}
    assert mention_spans(words("nothing to see here ."), lex) == {}


def test_mention_spans_longest_match():
    lex = default_lexicon()
    spans = mention_spans(words("the left kidney shows normal uptake ."), lex)
    assert spans == {anatomy.CLASS_IDS["kidney_left"]: [(1, 3)]}


def test_every_template_class_has_a_term():
    lex = default_lexicon()
    for o in default_phantom_config().organs:
        assert lex.terms_for(o.organ, "en") and lex.terms_for(o.organ, "zh")


def test_chinese_report():
    s = generate_phantom(0, default_phantom_config(**SMALL, language="zh"))
    assert s.report.language == "zh" and "代谢" in s.report.text


def test_cohort_default_strata_sizes():
    assert [c for _, _, c in COHORT_STRATA] == [30, 105, 46]


def test_cohort_errors():
    with pytest.raises(ConfigurationError):
        make_cohort(0, n=1)
    with pytest.raises(ConfigurationError):
        make_cohort(0, n=5, age_range=(50, 40))


def test_shared_factor_no_noise_is_collinear():
    cfg = default_phantom_config(**SMALL, lesions=[], pet_noise=0.0)
    eff = EffectModel(factors=[{"liver": 0.3, "spleen": 0.6}])
    c = make_cohort(2, n=12, effect=eff, config=cfg)
    ids = c.organ_ids
    li, sp = ids.index(anatomy.CLASS_IDS["liver"]), ids.index(anatomy.CLASS_IDS["spleen"])
    r = np.corrcoef(c.uptakes[:, li], c.uptakes[:, sp])[0, 1]
    assert r == pytest.approx(1.0, abs=1e-12)


def test_independent_organs_decorrelate():
    cfg = default_phantom_config(dims=(16, 16, 32), spacing=(10, 10, 20), lesions=[])
    eff = EffectModel(default_noise_sd=0.2)
    c = make_cohort(3, n=200, effect=eff, config=cfg)
    r = np.corrcoef(c.uptakes.T)
    off = r[~np.eye(len(r), dtype=bool)]
    assert np.nanmax(np.abs(off)) < 0.2
    assert np.nanmean(np.abs(off)) < 0.1


def test_cohort_covariance_matches_implant():
    from sdfholo import atlas
    cfg = default_phantom_config(dims=(16, 16, 32), spacing=(10, 10, 20), lesions=[])
    # age-driven structure: uniform ages have low kurtosis, so the sample covariance
    # settles faster than with a Gaussian latent factor of the same size
    eff = EffectModel(age_slope={"liver": 0.01, "spleen": 0.008, "heart": -0.006},
                      factors=[{"liver": 0.1, "spleen": 0.1}], default_noise_sd=0.05)
    c = make_cohort(0, n=500, effect=eff, config=cfg)
    fm = atlas.suv_features(c.studies)
    emp = atlas.covariance_matrix(fm)
    ana = c.analytic_covariance()
    ids = [fm.organ_ids.index(o) for o in c.organ_ids]
    emp = emp[np.ix_(ids, ids)]
    rel = np.linalg.norm(emp - ana) / np.linalg.norm(ana)
    assert rel <= 0.10, rel


def test_cohort_generator_unbiased():
    """Mean over independent cohorts of sample/analytic variance is 1 within Monte-Carlo error."""
    cfg = default_phantom_config(dims=(16, 16, 32), spacing=(10, 10, 20), lesions=[])
    eff = EffectModel(age_slope={"liver": 0.01}, factors=[{"liver": 0.1, "spleen": 0.1}],
                      default_noise_sd=0.05)
    ratios = []
    for seed in range(20):
        c = make_cohort(seed, n=100, effect=eff, config=cfg)
        ana = c.analytic_covariance()
        ana -= np.diag([c.pet_noise ** 2 / c.voxel_counts[o] for o in c.organ_ids])  # uptakes skip voxel noise
        emp = np.cov(c.uptakes.T)
        ratios.append(np.diag(emp) / np.diag(ana))
    ratios = np.array(ratios)
    se = ratios.std(axis=0, ddof=1) / np.sqrt(len(ratios))
    assert np.all(np.abs(ratios.mean(axis=0) - 1.0) <= 4 * se)
