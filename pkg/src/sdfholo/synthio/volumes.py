"""Volume/mask/report containers and the raw + JSON-sidecar study format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConsistencyError, CorruptFileError

_DTYPES = {"float32": np.dtype("<f4"), "uint16": np.dtype("<u2")}
MODALITIES = ("CT", "PET")


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ConsistencyError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple
    modality: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.spacing = _check_spacing(self.spacing)
        if self.values.ndim != 3:
            raise ConsistencyError(f"volume must be 3-D, got shape {self.values.shape}")
        if self.modality not in MODALITIES:
            raise ConsistencyError(f"unknown modality {self.modality!r}")
        if not np.isfinite(self.values).all():
            raise ConsistencyError("volume contains non-finite values")
        if self.modality == "PET" and (self.values < 0).any():
            raise ConsistencyError("PET values must be non-negative")

    @property
    def dims(self) -> tuple:
        return tuple(self.values.shape)


@dataclass
class MaskVolume:
    labels: np.ndarray
    spacing: tuple

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ConsistencyError(f"mask must be 3-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 180):
            raise ConsistencyError("mask labels must lie in 0..180")
        self.labels = labels.astype(np.uint16)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.labels.shape)

    def classes(self) -> list:
        return [int(c) for c in np.unique(self.labels) if c != 0]


@dataclass
class Report:
    text: str
    tokens: list
    language: str = "en"


@dataclass
class Study:
    ct: Volume
    pet: Volume
    mask: MaskVolume
    report: Report
    subject_age: float
    lesion: MaskVolume | None = None
    sources: dict = field(default_factory=dict)  # source id -> MaskVolume (pre-fusion)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        check_grids(self)
        if not 0 <= self.subject_age <= 120:
            raise ConsistencyError(f"subject age {self.subject_age} outside [0, 120]")

    @property
    def dims(self) -> tuple:
        return self.ct.dims

    @property
    def spacing(self) -> tuple:
        return self.ct.spacing


def check_grids(study: Study):
    grids = {"ct": study.ct, "pet": study.pet, "mask": study.mask}
    if study.lesion is not None:
        grids["lesion"] = study.lesion
    for k, v in study.sources.items():
        grids[f"source_{k}"] = v
    ref = study.ct
    for name, g in grids.items():
        if g.dims != ref.dims:
            raise ConsistencyError(f"{name} dims {g.dims} disagree with ct dims {ref.dims}")
        if g.spacing != ref.spacing:
            raise ConsistencyError(f"{name} spacing {g.spacing} disagrees with ct spacing {ref.spacing}")


def write_array(directory: Path, stem: str, array: np.ndarray, dtype: str, spacing, modality):
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = {
        "dims": list(array.shape),
        "spacing": list(spacing),
        "modality": modality,
        "dtype": dtype,
        "byte_order": "little",
    }
    (directory / f"{stem}.raw").write_bytes(payload.tobytes(order="C"))
    (directory / f"{stem}.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return [directory / f"{stem}.raw", directory / f"{stem}.json"]


def read_array(directory: Path, stem: str):
    header = json.loads((directory / f"{stem}.json").read_text())
    if header.get("byte_order") != "little":
        raise CorruptFileError(f"{stem}: unsupported byte order {header.get('byte_order')!r}")
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise CorruptFileError(f"{stem}: unsupported dtype {header.get('dtype')!r}")
    dims = tuple(int(d) for d in header["dims"])
    raw = (directory / f"{stem}.raw").read_bytes()
    expected = int(np.prod(dims))
    if len(raw) % dtype.itemsize:
        raise CorruptFileError(f"{stem}.raw: {len(raw)} bytes is not a whole number of {header['dtype']} values")
    count = len(raw) // dtype.itemsize
    if count < expected:
        raise CorruptFileError(f"{stem}.raw truncated: {count} values, header dims {dims} need {expected}")
    if count > expected:
        raise ConsistencyError(f"{stem}: header dims {dims} imply {expected} values but payload holds {count}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return data, header


def save_study(study: Study, directory) -> list:
    """Write a study directory; returns the list of files written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    paths += write_array(d, "ct", study.ct.values, "float32", study.ct.spacing, "CT")
    paths += write_array(d, "pet", study.pet.values, "float32", study.pet.spacing, "PET")
    paths += write_array(d, "mask", study.mask.labels, "uint16", study.mask.spacing, "MASK")
    if study.lesion is not None:
        paths += write_array(d, "lesion", study.lesion.labels, "uint16", study.lesion.spacing, "MASK")
    for k in sorted(study.sources):
        src = study.sources[k]
        paths += write_array(d, f"source_{k}", src.labels, "uint16", src.spacing, "MASK")
    report = {"text": study.report.text, "tokens": list(map(int, study.report.tokens)),
              "language": study.report.language}
    (d / "report.json").write_text(json.dumps(report, indent=2, ensure_ascii=False, sort_keys=True))
    meta = dict(study.meta)
    meta["subject_age"] = study.subject_age
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return paths + [d / "report.json", d / "meta.json"]


def load_study(directory) -> Study:
    d = Path(directory)
    ct, h_ct = read_array(d, "ct")
    pet, h_pet = read_array(d, "pet")
    mask, h_mask = read_array(d, "mask")
    for name, h in (("pet", h_pet), ("mask", h_mask)):
        if tuple(h["dims"]) != tuple(h_ct["dims"]):
            raise ConsistencyError(f"{name} dims {tuple(h['dims'])} disagree with ct dims {tuple(h_ct['dims'])}")
    lesion = None
    if (d / "lesion.json").exists():
        arr, h = read_array(d, "lesion")
        lesion = MaskVolume(arr, h["spacing"])
    sources = {}
    for p in sorted(d.glob("source_*.json")):
        key = p.stem[len("source_"):]
        arr, h = read_array(d, p.stem)
        sources[key] = MaskVolume(arr, h["spacing"])
    rep = json.loads((d / "report.json").read_text())
    meta = json.loads((d / "meta.json").read_text())
    age = meta.pop("subject_age")
    return Study(
        ct=Volume(ct, h_ct["spacing"], "CT"),
        pet=Volume(pet, h_pet["spacing"], "PET"),
        mask=MaskVolume(mask, h_mask["spacing"]),
        report=Report(rep["text"], rep["tokens"], rep.get("language", "en")),
        subject_age=age,
        lesion=lesion,
        sources=sources,
        meta=meta,
    )
