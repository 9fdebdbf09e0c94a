"""Turn a Study into model-ready arrays: partition, patchify, normalise, spans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..partition import REGION_NAMES, partition
from ..synthio.text import default_lexicon, mention_spans, words
from .tokens import dominant_classes, normalize_ct, normalize_pet, patchify, sample_mask


@dataclass
class PreparedRegion:
    index: int
    name: str
    ct: np.ndarray  # N x 4096, normalised
    pet: np.ndarray
    coords: np.ndarray  # N x 3
    dominant: np.ndarray  # N

    @property
    def n_patches(self) -> int:
        return len(self.coords)


@dataclass
class PreparedStudy:
    regions: list
    tokens: np.ndarray
    spans: dict
    age: float
    manifest: dict

    @property
    def classes(self) -> list:
        found = set()
        for r in self.regions:
            found.update(int(c) for c in np.unique(r.dominant) if c != 0)
        return sorted(found)


def prepare_study(study, config=None, lexicon=None) -> PreparedStudy:
    """``config`` is a ModelConfig (only the normalisation bounds are read)."""
    lo, hi = config.ct_window if config is not None else (-1000.0, 1000.0)
    scale = config.pet_scale if config is not None else 5.0
    cap = config.pet_cap if config is not None else 2.0
    rs = partition(study)
    regions = []
    for reg in rs:
        sub = reg.study
        ct, coords = patchify(normalize_ct(sub.ct.values, lo, hi))
        pet, _ = patchify(normalize_pet(sub.pet.values, scale, cap))
        regions.append(PreparedRegion(reg.index, reg.name, ct, pet, coords, dominant_classes(sub.mask.labels)))
    tokens = np.asarray(study.report.tokens, dtype=np.int64)
    # token 0 is BOS, so surface word i sits at token i + 1
    spans = mention_spans(words(study.report.text), lexicon or default_lexicon(), offset=1)
    spans = {c: [(s, e) for s, e in v if e <= len(tokens)] for c, v in spans.items()}
    return PreparedStudy(regions, tokens, {c: v for c, v in spans.items() if v}, float(study.subject_age),
                         rs.manifest())


def sample_study_masks(prep: PreparedStudy, ratio: float, seed: int, step: int, study_index: int) -> list:
    """One synchronized (visible, masked) pair per region, keyed on (seed, step, study, region)."""
    return [sample_mask(r.n_patches, ratio, seed, step, study_index, r.index) for r in prep.regions]


__all__ = ["PreparedRegion", "PreparedStudy", "prepare_study", "sample_study_masks", "REGION_NAMES"]
