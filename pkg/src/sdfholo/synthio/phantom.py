"""Synthetic co-registered CT/PET/mask/report phantoms and cohorts with implanted covariance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import anatomy
from ..errors import ConfigurationError
from ..rng import make_rng
from .text import (
    LANGUAGES,
    default_lexicon,
    default_vocabulary,
    lesion_sentence,
    organ_sentence,
    tokenize,
)
from .volumes import MaskVolume, Report, Study, Volume

PATCH = 16
COHORT_STRATA = ((12, 45, 30), (46, 65, 105), (66, 82, 46))


@dataclass
class OrganSpec:
    organ: int
    center: tuple  # fractions of dims
    radii: tuple  # fractions of dims
    ct: float
    suv: float

    def __post_init__(self):
        self.organ = anatomy.resolve_class(self.organ)
        self.center = tuple(float(c) for c in self.center)
        self.radii = tuple(float(r) for r in self.radii)


@dataclass
class LesionSpec:
    organ: int
    amplitude: float
    sigma: float = 1.5  # voxels
    center: tuple | None = None  # fractions; defaults to the organ centre

    def __post_init__(self):
        self.organ = anatomy.resolve_class(self.organ)


@dataclass
class RandomLesions:
    organs: list
    probability: float = 0.3
    amplitude: tuple = (3.0, 8.0)
    sigma: float = 1.5

    def __post_init__(self):
        self.organs = [anatomy.resolve_class(o) for o in self.organs]


@dataclass
class PhantomConfig:
    dims: tuple
    spacing: tuple
    organs: list
    lesions: list = field(default_factory=list)
    random_lesions: RandomLesions | None = None
    language: str = "en"
    ct_noise: float = 20.0
    pet_noise: float = 0.1
    ct_background: float = -1000.0
    pet_background: float = 0.0
    elevated_threshold: float = 2.5
    emit_sources: bool = False
    source_a_missing: list = field(default_factory=lambda: ["humerus_left", "humerus_right"])

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.organs = [o if isinstance(o, OrganSpec) else OrganSpec(**o) for o in self.organs]
        self.lesions = [l if isinstance(l, LesionSpec) else LesionSpec(**l) for l in self.lesions]
        if isinstance(self.random_lesions, dict):
            self.random_lesions = RandomLesions(**self.random_lesions)
        self.source_a_missing = [anatomy.resolve_class(c) for c in self.source_a_missing]

    def validate(self):
        if len(self.dims) != 3 or any(d <= 0 or d % PATCH for d in self.dims):
            raise ConfigurationError(f"grid dims {self.dims} must be positive multiples of {PATCH}")
        if len(self.organs) < 2:
            raise ConfigurationError("phantom needs at least two organ ellipsoids")
        if self.language not in LANGUAGES:
            raise ConfigurationError(f"unsupported report language {self.language!r}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"spacing {self.spacing} must be positive")
        organ_ids = {o.organ for o in self.organs}
        for les in self.lesions:
            if les.organ not in organ_ids:
                raise ConfigurationError(f"lesion organ {les.organ} is not among the phantom organs")
        lex = default_lexicon()
        for o in self.organs:
            if not lex.terms_for(o.organ, self.language):
                raise ConfigurationError(
                    f"class {anatomy.class_name(o.organ)} has no {self.language} lexicon term")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "PhantomConfig":
        return cls(**payload)


def default_phantom_config(**overrides) -> PhantomConfig:
    """Coarse whole-body layout; z (third axis) runs head to feet."""
    organs = [
        ("brain", (0.5, 0.5, 0.07), (0.30, 0.30, 0.06), 35.0, 8.0),
        ("thyroid_gland", (0.5, 0.45, 0.14), (0.10, 0.08, 0.02), 60.0, 1.8),
        ("heart", (0.5, 0.45, 0.27), (0.16, 0.16, 0.06), 40.0, 3.0),
        ("lung_left", (0.68, 0.5, 0.27), (0.14, 0.22, 0.11), -800.0, 0.5),
        ("lung_right", (0.32, 0.5, 0.27), (0.14, 0.22, 0.11), -800.0, 0.5),
        ("liver", (0.36, 0.5, 0.43), (0.20, 0.22, 0.07), 55.0, 2.2),
        ("spleen", (0.70, 0.55, 0.42), (0.08, 0.10, 0.04), 45.0, 2.0),
        ("stomach", (0.62, 0.42, 0.44), (0.10, 0.10, 0.04), 30.0, 1.6),
        ("kidney_left", (0.68, 0.62, 0.49), (0.06, 0.07, 0.04), 35.0, 2.5),
        ("kidney_right", (0.32, 0.62, 0.49), (0.06, 0.07, 0.04), 35.0, 2.5),
        ("urinary_bladder", (0.5, 0.45, 0.66), (0.10, 0.10, 0.04), 10.0, 15.0),
        ("humerus_left", (0.90, 0.5, 0.28), (0.05, 0.05, 0.10), 700.0, 0.8),
        ("humerus_right", (0.10, 0.5, 0.28), (0.05, 0.05, 0.10), 700.0, 0.8),
        ("femur_left", (0.62, 0.5, 0.84), (0.07, 0.07, 0.12), 700.0, 0.8),
        ("femur_right", (0.38, 0.5, 0.84), (0.07, 0.07, 0.12), 700.0, 0.8),
        ("skeletal_muscle", (0.5, 0.5, 0.5), (0.42, 0.35, 0.5), 40.0, 0.9),
    ]
    payload = dict(
        dims=(48, 48, 128),
        spacing=(4.0, 4.0, 8.0),
        organs=[dict(organ=n, center=c, radii=r, ct=ct, suv=suv) for n, c, r, ct, suv in organs],
        lesions=[dict(organ="liver", amplitude=6.0, sigma=1.5)],
    )
    payload.update(overrides)
    return PhantomConfig(**payload)


def _grid(dims):
    return np.indices(dims, dtype=np.float64)


def _ellipsoid(grid, dims, center, radii):
    acc = 0.0
    for ax in range(3):
        c = center[ax] * dims[ax]
        r = max(radii[ax] * dims[ax], 0.5)
        acc = acc + ((grid[ax] - c) / r) ** 2
    return acc <= 1.0


def paint_labels(config: PhantomConfig) -> np.ndarray:
    """Ellipsoid labels; earlier organs take priority where ellipsoids overlap."""
    dims = config.dims
    grid = _grid(dims)
    labels = np.zeros(dims, dtype=np.uint16)
    for organ in reversed(config.organs):
        labels[_ellipsoid(grid, dims, organ.center, organ.radii)] = organ.organ
    return labels


def _draw_lesions(config: PhantomConfig, labels, rng) -> list:
    """Fixed lesions plus seeded random ones; each as (organ, amplitude, sigma, centre in voxels)."""
    dims = np.array(config.dims, dtype=np.float64)
    out = []
    organ_center = {o.organ: np.array(o.center) * dims for o in config.organs}
    for les in config.lesions:
        c = np.array(les.center) * dims if les.center is not None else organ_center[les.organ]
        out.append((les.organ, float(les.amplitude), float(les.sigma), c))
    rl = config.random_lesions
    if rl is not None:
        for organ in rl.organs:
            hit = rng.random() < rl.probability
            amp = rng.uniform(*rl.amplitude)
            voxels = np.argwhere(labels == organ)
            if not hit or len(voxels) == 0:
                continue
            c = voxels[rng.integers(len(voxels))].astype(np.float64)
            out.append((organ, float(amp), float(rl.sigma), c))
    return out


def _derive_sources(labels, config: PhantomConfig, rng):
    """Two simulated segmentation tools: ``a`` relabels ids and misses some classes;
    ``b`` keeps canonical ids, disagrees on a boundary shell, and emits small spurious islands."""
    from ..maskfusion import LabelLookup

    missing = set(config.source_a_missing)
    a = np.where(np.isin(labels, list(missing)), 0, labels).astype(np.int64)
    a = np.where(a > 0, 181 - a, 0).astype(np.uint16)

    b = labels.copy()
    present = [c for c in np.unique(labels) if c != 0]
    if len(present) >= 2:
        from scipy import ndimage
        # b mislabels the outer shell of the first organ as the next one
        first, other = present[0], present[1]
        region = labels == first
        shell = region & ~ndimage.binary_erosion(region)
        b[shell] = other
    n_islands = 3
    for _ in range(n_islands):
        idx = tuple(int(rng.integers(d)) for d in labels.shape)
        if labels[idx] == 0:
            b[idx] = present[int(rng.integers(len(present)))] if present else 0
    all_ids = range(1, anatomy.NUM_CLASSES + 1)
    lookup = LabelLookup(
        {"a": {181 - c: c for c in all_ids if c not in missing}, "b": {c: c for c in all_ids}},
        {c: c not in missing for c in all_ids},
    )
    return a, b, lookup


def generate_phantom(seed: int, config: PhantomConfig | None = None, uptake: dict | None = None,
                     age: float = 40.0, vocab=None) -> Study:
    """Deterministic study for ``(seed, config)``; ``uptake`` overrides per-organ SUV."""
    config = config or default_phantom_config()
    config.validate()
    vocab = vocab or default_vocabulary()
    lex = default_lexicon()
    dims = config.dims
    labels = paint_labels(config)

    rng_ct = make_rng(seed, 1)
    rng_pet = make_rng(seed, 2)
    rng_les = make_rng(seed, 3)
    rng_src = make_rng(seed, 4)

    suv = {o.organ: float(o.suv) for o in config.organs}
    if uptake:
        suv.update({anatomy.resolve_class(k): float(v) for k, v in uptake.items()})
    ct_lut = np.full(anatomy.NUM_CLASSES + 1, config.ct_background)
    pet_lut = np.full(anatomy.NUM_CLASSES + 1, config.pet_background)
    for o in config.organs:
        ct_lut[o.organ] = o.ct
        pet_lut[o.organ] = suv[o.organ]
    ct = ct_lut[labels] + rng_ct.normal(0.0, config.ct_noise, size=dims)
    pet = pet_lut[labels].astype(np.float64)

    lesions = _draw_lesions(config, labels, rng_les)
    lesion_mask = np.zeros(dims, dtype=bool)
    if lesions:
        grid = _grid(dims)
        for organ, amp, sigma, c in lesions:
            if amp <= 0:
                continue
            r2 = sum((grid[ax] - c[ax]) ** 2 for ax in range(3))
            g = np.exp(-r2 / (2.0 * sigma * sigma))
            pet += amp * g
            lesion_mask |= g >= 0.5
    pet = np.clip(pet + rng_pet.normal(0.0, config.pet_noise, size=dims), 0.0, None)

    present = set(int(c) for c in np.unique(labels))
    lang = config.language
    sentences = []
    for o in config.organs:
        if o.organ in present:
            term = lex.primary_term(o.organ, lang)
            sentences.append(organ_sentence(term, suv[o.organ] >= config.elevated_threshold, lang))
    for organ, amp, _, _ in lesions:
        if amp > 0 and organ in present:
            sentences.append(lesion_sentence(lex.primary_term(organ, lang), lang))
    text = " ".join(sentences)

    sources = {}
    meta = {"seed": int(seed), "lesions": [
        {"organ": int(o), "amplitude": a, "sigma": s, "center": [float(x) for x in c]}
        for o, a, s, c in lesions]}
    if config.emit_sources:
        a, b, _ = _derive_sources(labels, config, rng_src)
        sources = {"a": MaskVolume(a, config.spacing), "b": MaskVolume(b, config.spacing)}

    return Study(
        ct=Volume(ct, config.spacing, "CT"),
        pet=Volume(pet, config.spacing, "PET"),
        mask=MaskVolume(labels, config.spacing),
        report=Report(text, tokenize(text, vocab), lang),
        subject_age=float(age),
        lesion=MaskVolume(lesion_mask.astype(np.uint16), config.spacing),
        sources=sources,
        meta=meta,
    )


def source_lookup(config: PhantomConfig):
    """The label lookup matching the simulated source masks of ``config``."""
    return _derive_sources(paint_labels(config), config, make_rng(0, 4))[2]


# ---- cohorts -------------------------------------------------------------------


@dataclass
class EffectModel:
    """Per-subject organ uptake = base + slope*(age - age_ref) + loadings . factors + noise."""

    age_slope: dict = field(default_factory=dict)  # class -> SUV per year
    age_ref: float | None = None  # defaults to the cohort's mean age
    factors: list = field(default_factory=list)  # [{class: loading}]
    noise_sd: dict = field(default_factory=dict)  # class -> sd
    default_noise_sd: float = 0.0
    extra_variance: list = field(default_factory=list)  # [{"organ", "age_min", "age_max", "variance"}]

    def __post_init__(self):
        self.age_slope = {anatomy.resolve_class(k): float(v) for k, v in self.age_slope.items()}
        self.factors = [{anatomy.resolve_class(k): float(v) for k, v in f.items()} for f in self.factors]
        self.noise_sd = {anatomy.resolve_class(k): float(v) for k, v in self.noise_sd.items()}
        self.extra_variance = [dict(e, organ=anatomy.resolve_class(e["organ"])) for e in self.extra_variance]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AgeDistribution:
    """Mixture of discrete uniform integer ages: [(lo, hi, weight)]."""

    components: list

    def mean(self) -> float:
        return sum(w * (lo + hi) / 2.0 for lo, hi, w in self.components) / self.total

    def var(self) -> float:
        m = self.mean()
        second = sum(w * (((hi - lo + 1) ** 2 - 1) / 12.0 + ((lo + hi) / 2.0) ** 2)
                     for lo, hi, w in self.components) / self.total
        return second - m * m

    def prob(self, a0, a1) -> float:
        p = 0.0
        for lo, hi, w in self.components:
            k = max(0, min(hi, int(np.floor(a1))) - max(lo, int(np.ceil(a0))) + 1)
            p += w * k / (hi - lo + 1)
        return p / self.total

    @property
    def total(self) -> float:
        return float(sum(w for _, _, w in self.components))


@dataclass
class Cohort:
    studies: list
    ages: np.ndarray
    organ_ids: list
    uptakes: np.ndarray  # subjects x organs, generator-side values
    effect: EffectModel
    age_distribution: AgeDistribution
    voxel_counts: dict
    pet_noise: float

    def implant(self) -> dict:
        return {
            "organ_ids": list(self.organ_ids),
            "effect": self.effect.to_dict(),
            "age_components": [list(c) for c in self.age_distribution.components],
        }

    def analytic_covariance(self) -> np.ndarray:
        """Covariance of organ SUVmeans implied by the implant (ages random)."""
        ids = self.organ_ids
        k = len(ids)
        eff = self.effect
        dist = self.age_distribution
        slope = np.array([eff.age_slope.get(c, 0.0) for c in ids])
        cov = np.outer(slope, slope) * dist.var()
        for f in eff.factors:
            load = np.array([f.get(c, 0.0) for c in ids])
            cov += np.outer(load, load)
        diag = np.array([eff.noise_sd.get(c, eff.default_noise_sd) ** 2 for c in ids])
        for e in eff.extra_variance:
            if e["organ"] in ids:
                diag[ids.index(e["organ"])] += e["variance"] * dist.prob(e["age_min"], e["age_max"])
        diag += np.array([self.pet_noise ** 2 / max(self.voxel_counts.get(c, 1), 1) for c in ids])
        return cov + np.diag(diag[:k])


def make_cohort(seed: int, n: int | None = None, age_range=(12, 82), effect: EffectModel | None = None,
                config: PhantomConfig | None = None, strata=None) -> Cohort:
    """Cohort of healthy phantoms; ``strata`` = [(lo, hi, count)] overrides ``n``/``age_range``."""
    config = config or default_phantom_config(lesions=[])
    effect = effect or EffectModel()
    if strata is not None:
        comps = [(int(lo), int(hi), int(cnt)) for lo, hi, cnt in strata]
        n = sum(c for _, _, c in comps)
    else:
        lo, hi = int(age_range[0]), int(age_range[1])
        comps = [(lo, hi, n)]
    if n is None or n < 2:
        raise ConfigurationError(f"cohort size must be >= 2, got {n}")
    for lo, hi, _ in comps:
        if lo > hi:
            raise ConfigurationError(f"empty age range [{lo}, {hi}]")
    dist = AgeDistribution(comps)
    rng = make_rng(seed, 100)
    ages = np.concatenate([rng.integers(lo, hi + 1, size=cnt) for lo, hi, cnt in comps]).astype(float)

    organ_ids = [o.organ for o in config.organs]
    base = np.array([o.suv for o in config.organs])
    age_ref = effect.age_ref if effect.age_ref is not None else dist.mean()
    slope = np.array([effect.age_slope.get(c, 0.0) for c in organ_ids])
    sd = np.array([effect.noise_sd.get(c, effect.default_noise_sd) for c in organ_ids])
    rng_u = make_rng(seed, 101)
    uptakes = base[None, :] + np.outer(ages - age_ref, slope)
    for f in effect.factors:
        load = np.array([f.get(c, 0.0) for c in organ_ids])
        uptakes += np.outer(rng_u.standard_normal(n), load)
    uptakes += rng_u.standard_normal((n, len(organ_ids))) * sd[None, :]
    for e in effect.extra_variance:
        if e["organ"] not in organ_ids:
            continue
        j = organ_ids.index(e["organ"])
        inside = (ages >= e["age_min"]) & (ages <= e["age_max"])
        uptakes[:, j] += inside * rng_u.standard_normal(n) * np.sqrt(e["variance"])
    uptakes = np.clip(uptakes, 0.0, None)

    vocab = default_vocabulary()
    studies = []
    for i in range(n):
        up = {c: float(uptakes[i, j]) for j, c in enumerate(organ_ids)}
        s = generate_phantom(int(make_rng(seed, 102, i).integers(2**31)), config, uptake=up,
                             age=ages[i], vocab=vocab)
        s.meta["subject_id"] = f"subject_{i:04d}"
        studies.append(s)
    labels = paint_labels(config)
    counts = {c: int((labels == c).sum()) for c in organ_ids}
    return Cohort(studies, ages, organ_ids, uptakes, effect, dist, counts, config.pet_noise)
