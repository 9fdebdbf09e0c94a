"""Split a whole-body study into six anatomically ordered regions.

Axis 2 (z) runs head to feet, so a structure's superior extent is its smallest
slice index. Five regions are axial slabs cut at mask landmarks (fixed
z-percentiles when a landmark is missing); the upper-limb region is carved out
of the thorax slab by label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import anatomy
from .errors import ConsistencyError, DegeneratePartitionError
from .synthio.volumes import MaskVolume, Study, Volume, check_grids

REGION_NAMES = ("head_neck", "thorax", "upper_abdomen", "pelvis", "upper_limbs", "lower_limbs")
AXIAL_REGIONS = ("head_neck", "thorax", "upper_abdomen", "pelvis", "lower_limbs")
DEFAULT_FALLBACK = (0.12, 0.40, 0.58, 0.72)
PATCH = 16


@dataclass
class LandmarkTable:
    lung_superior: int | None = None
    lung_inferior: int | None = None
    liver_superior: int | None = None
    bladder_superior: int | None = None
    femur_superior: int | None = None
    femur_inferior: int | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _z_extent(labels: np.ndarray, classes) -> tuple | None:
    hit = np.isin(labels, classes).any(axis=(0, 1))
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        return None
    return int(idx[0]), int(idx[-1])


def compute_landmarks(mask: MaskVolume) -> LandmarkTable:
    labels = mask.labels
    lm = anatomy.LANDMARK_CLASSES
    lung = _z_extent(labels, lm["lung"])
    liver = _z_extent(labels, lm["liver"])
    bladder = _z_extent(labels, lm["bladder"])
    femur = _z_extent(labels, lm["femur"])
    return LandmarkTable(
        lung_superior=lung[0] if lung else None,
        lung_inferior=lung[1] if lung else None,
        liver_superior=liver[0] if liver else None,
        bladder_superior=bladder[0] if bladder else None,
        femur_superior=femur[0] if femur else None,
        femur_inferior=femur[1] if femur else None,
    )


@dataclass
class Region:
    name: str
    index: int
    study: Study  # cropped and padded to multiples of 16
    z_bounds: tuple  # source slab [lo, hi)
    original_dims: tuple


@dataclass
class RegionSet:
    regions: list
    landmarks: LandmarkTable
    boundaries: tuple
    fallback_used: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def manifest(self) -> dict:
        return {
            "region_order": list(REGION_NAMES),
            "regions": [
                {"index": r.index, "name": r.name, "z_bounds": list(r.z_bounds),
                 "original_dims": list(r.original_dims), "padded_dims": list(r.study.dims)}
                for r in self.regions
            ],
            "boundaries": list(self.boundaries),
            "landmarks": self.landmarks.as_dict(),
            "fallback_used": dict(self.fallback_used),
        }


def _pad_to(arr: np.ndarray, multiple: int) -> np.ndarray:
    pads = [(0, (-s) % multiple) for s in arr.shape]
    return np.pad(arr, pads, mode="constant", constant_values=0)


def _crop_study(study: Study, lo: int, hi: int, keep=None) -> Study:
    sl = (slice(None), slice(None), slice(lo, hi))
    ct = study.ct.values[sl]
    pet = study.pet.values[sl]
    labels = study.mask.labels[sl]
    lesion = study.lesion.labels[sl] if study.lesion is not None else None
    if keep is not None:
        ct = np.where(keep, ct, 0.0)
        pet = np.where(keep, pet, 0.0)
        labels = np.where(keep, labels, 0)
        if lesion is not None:
            lesion = np.where(keep, lesion, 0)
    sp = study.spacing
    return Study(
        ct=Volume(_pad_to(ct, PATCH), sp, "CT"),
        pet=Volume(_pad_to(pet, PATCH), sp, "PET"),
        mask=MaskVolume(_pad_to(labels, PATCH), sp),
        report=study.report,
        subject_age=study.subject_age,
        lesion=MaskVolume(_pad_to(lesion, PATCH), sp) if lesion is not None else None,
        meta=dict(study.meta),
    )


def slab_boundaries(landmarks: LandmarkTable, depth: int, fallback=DEFAULT_FALLBACK):
    """Four cut indices (head|thorax|abdomen|pelvis|legs) and which ones fell back."""
    candidates = [
        ("head_neck|thorax", [landmarks.lung_superior]),
        ("thorax|upper_abdomen", [landmarks.lung_inferior, landmarks.liver_superior]),
        ("upper_abdomen|pelvis", [landmarks.bladder_superior]),
        ("pelvis|lower_limbs", [landmarks.femur_superior]),
    ]
    cuts, used = [], {}
    for (name, options), q in zip(candidates, fallback):
        value = next((v for v in options if v is not None), None)
        used[name] = value is None
        if value is None:
            value = int(round(q * depth))
        if not 0 <= value <= depth:
            raise ConsistencyError(f"landmark cut {name}={value} outside [0, {depth}]")
        cuts.append(int(value))
    return tuple(cuts), used


def partition(study: Study, landmarks: LandmarkTable | None = None, fallback_percentiles=DEFAULT_FALLBACK,
              limb_classes=anatomy.UPPER_LIMB_CLASSES) -> RegionSet:
    check_grids(study)
    landmarks = landmarks or compute_landmarks(study.mask)
    depth = study.dims[2]
    cuts, used = slab_boundaries(landmarks, depth, fallback_percentiles)
    edges = (0, *cuts, depth)
    slabs = {}
    for name, lo, hi in zip(AXIAL_REGIONS, edges[:-1], edges[1:]):
        if hi <= lo:
            raise DegeneratePartitionError(name, lo, hi)
        slabs[name] = (lo, hi)

    regions = []
    for index, name in enumerate(REGION_NAMES):
        if name == "upper_limbs":
            lo, hi = slabs["thorax"]
            keep = np.isin(study.mask.labels[:, :, lo:hi], limb_classes)
            sub = _crop_study(study, lo, hi, keep=keep)
        else:
            lo, hi = slabs[name]
            sub = _crop_study(study, lo, hi)
        regions.append(Region(name, index, sub, (lo, hi), (study.dims[0], study.dims[1], hi - lo)))
    return RegionSet(regions, landmarks, cuts, used)
