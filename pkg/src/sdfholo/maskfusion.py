"""Merge two source label volumes with different ontologies into the canonical mask.

Three steps: per-source relabelling through a curated lookup, priority fusion
(source ``a`` wins conflicts for classes it covers), and topology cleanup
(small 26-connected islands dropped, single-class cavities filled).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import anatomy
from .errors import ConfigurationError, ConsistencyError, UnmappedLabelError
from .synthio.text import default_lexicon, words
from .synthio.volumes import MaskVolume

STRUCT26 = np.ones((3, 3, 3), dtype=bool)
STRUCT6 = ndimage.generate_binary_structure(3, 1)


@dataclass
class LabelLookup:
    source_maps: dict  # source id -> {source label: canonical id}
    covered_by_a: dict = field(default_factory=dict)  # canonical id -> bool

    def __post_init__(self):
        self.source_maps = {str(s): {int(k): int(v) for k, v in m.items()}
                            for s, m in self.source_maps.items()}
        self.covered_by_a = {int(k): bool(v) for k, v in self.covered_by_a.items()}
        for s, m in self.source_maps.items():
            bad = [v for v in m.values() if not 1 <= v <= anatomy.NUM_CLASSES]
            if bad:
                raise ConfigurationError(f"source {s!r} maps to non-canonical ids {sorted(set(bad))}")
            if any(k <= 0 for k in m):
                raise ConfigurationError(f"source {s!r} declares a mapping for background")

    def is_covered_by_a(self, cid: int) -> bool:
        return self.covered_by_a.get(int(cid), False)

    def to_json(self) -> dict:
        return {
            "source": {s: {str(k): v for k, v in sorted(m.items())} for s, m in sorted(self.source_maps.items())},
            "covered_by_a": {str(k): v for k, v in sorted(self.covered_by_a.items())},
        }

    @classmethod
    def from_json(cls, payload: dict) -> "LabelLookup":
        return cls(payload["source"], payload.get("covered_by_a", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "LabelLookup":
        return cls.from_json(json.loads(Path(path).read_text()))


def canonical_from_name(name: str, lexicon=None):
    """Resolve a tool's label name (synonyms, laterality as prefix or suffix) to a class id."""
    lexicon = lexicon or default_lexicon()
    ws = words(name.replace("_", " "))
    cid = lexicon.terms.get(tuple(ws))
    if cid is None:
        for side in ("left", "right"):
            if side in ws:
                rest = [w for w in ws if w != side]
                cid = lexicon.terms.get(tuple([side, *rest]))
                break
    return cid


def lookup_from_names(named_sources: dict, lexicon=None) -> LabelLookup:
    """Build a lookup from ``{source: {label: tool label name}}``; source ``a`` defines coverage."""
    maps = {}
    for source, table in named_sources.items():
        m = {}
        for label, name in table.items():
            cid = canonical_from_name(name, lexicon)
            if cid is None:
                raise ConfigurationError(f"source {source!r} label {label} name {name!r} has no canonical class")
            m[int(label)] = cid
        maps[source] = m
    covered = {cid: True for cid in maps.get("a", {}).values()}
    return LabelLookup(maps, covered)


def map_labels(source_mask: MaskVolume, lookup: LabelLookup, source_id: str) -> MaskVolume:
    mapping = lookup.source_maps.get(str(source_id))
    if mapping is None:
        raise ConfigurationError(f"lookup has no table for source {source_id!r}")
    labels = source_mask.labels
    present = np.unique(labels)
    missing = [int(v) for v in present if v != 0 and int(v) not in mapping]
    if missing:
        raise UnmappedLabelError(missing, source_id)
    lut = np.zeros(max(int(present.max()) if present.size else 0, max(mapping, default=0)) + 1, dtype=np.uint16)
    for k, v in mapping.items():
        lut[k] = v
    return MaskVolume(lut[labels], source_mask.spacing)


def fuse_priority(mask_a: MaskVolume, mask_b: MaskVolume, lookup: LabelLookup) -> MaskVolume:
    if mask_a.dims != mask_b.dims:
        raise ConsistencyError(f"source grids differ: {mask_a.dims} vs {mask_b.dims}")
    if mask_a.spacing != mask_b.spacing:
        raise ConsistencyError(f"source spacings differ: {mask_a.spacing} vs {mask_b.spacing}")
    a = mask_a.labels
    b = mask_b.labels
    covered = np.zeros(anatomy.NUM_CLASSES + 1, dtype=bool)
    for cid, flag in lookup.covered_by_a.items():
        covered[cid] = flag
    take_a = (a > 0) & ((b == 0) | (a == b) | covered[a])
    out = np.where(take_a, a, b)
    assert out.shape == a.shape
    return MaskVolume(out, mask_a.spacing)


@dataclass
class CleanupConfig:
    delta: int = 10
    fill_holes: bool = True

    def __post_init__(self):
        if self.delta < 1:
            raise ConfigurationError(f"delta must be >= 1, got {self.delta}")


def remove_small_islands(labels: np.ndarray, delta: int) -> np.ndarray:
    out = labels.copy()
    for c in np.unique(labels):
        if c == 0:
            continue
        comp, n = ndimage.label(labels == c, structure=STRUCT26)
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        small = sizes < delta
        small[0] = False
        if small.any():
            out[small[comp]] = 0
    return out


def _cavity_neighbour_classes(comp: np.ndarray, labels: np.ndarray, n: int):
    """For each background component, the set of classes 6-adjacent to it."""
    pairs = []
    for axis in range(3):
        for shift in (1, -1):
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis], dst[axis] = slice(0, -1), slice(1, None)
            else:
                src[axis], dst[axis] = slice(1, None), slice(0, -1)
            c = comp[tuple(src)]
            lab = labels[tuple(dst)]
            sel = (c > 0) & (lab > 0)
            pairs.append(np.stack([c[sel], lab[sel].astype(np.int64)], axis=1))
    pairs = np.unique(np.concatenate(pairs), axis=0) if pairs else np.zeros((0, 2), int)
    neighbours = {}
    for k, lab in pairs:
        neighbours.setdefault(int(k), set()).add(int(lab))
    return neighbours


def fill_enclosed_cavities(labels: np.ndarray) -> np.ndarray:
    out = labels.copy()
    comp, n = ndimage.label(labels == 0, structure=STRUCT6)
    if n == 0:
        return out
    border = set()
    for axis in range(3):
        for idx in (0, -1):
            border.update(np.unique(np.take(comp, idx, axis=axis)).tolist())
    neighbours = _cavity_neighbour_classes(comp, labels, n)
    fill = np.zeros(n + 1, dtype=np.int64)
    for k, classes in neighbours.items():
        if k not in border and len(classes) == 1:
            fill[k] = next(iter(classes))
    filled = fill[comp]
    sel = filled > 0
    out[sel] = filled[sel]
    return out


def topology_cleanup(mask: MaskVolume, config: CleanupConfig | None = None) -> MaskVolume:
    config = config or CleanupConfig()
    labels = remove_small_islands(mask.labels, config.delta)
    if config.fill_holes:
        labels = fill_enclosed_cavities(labels)
    return MaskVolume(labels, mask.spacing)


def fuse_sources(sources: dict, lookup: LabelLookup, config: CleanupConfig | None = None) -> MaskVolume:
    """Full pipeline over ``{"a": MaskVolume, "b": MaskVolume}``."""
    a = map_labels(sources["a"], lookup, "a")
    b = map_labels(sources["b"], lookup, "b")
    return topology_cleanup(fuse_priority(a, b, lookup), config)
