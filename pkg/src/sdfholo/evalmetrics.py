"""Lesion segmentation metrics, sliding-window inference and report-text metrics."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ConsistencyError, ContractViolation, DomainError

CONNECTIVITY = 26
_STRUCTURES = {6: ndimage.generate_binary_structure(3, 1), 18: ndimage.generate_binary_structure(3, 2),
               26: ndimage.generate_binary_structure(3, 3)}


@dataclass
class BinaryMask:
    mask: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.mask.ndim != 3:
            raise ConsistencyError(f"binary mask must be 3-D, got shape {self.mask.shape}")

    @property
    def voxel_ml(self) -> float:
        return float(np.prod(self.spacing)) / 1000.0


@dataclass
class SegScores:
    dsc: float
    fnv: float
    fpv: float
    flags: list = field(default_factory=list)


def _arrays(pred, gt):
    p = pred.mask if isinstance(pred, BinaryMask) else np.asarray(pred).astype(bool)
    g = gt.mask if isinstance(gt, BinaryMask) else np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ConsistencyError(f"prediction grid {p.shape} differs from ground truth {g.shape}")
    return p, g


def _spacing(spacing, *masks):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    for m in masks:
        if isinstance(m, BinaryMask):
            return m.spacing
    return (1.0, 1.0, 1.0)


def dsc(pred, gt) -> float:
    p, g = _arrays(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _unmatched_volume(a: np.ndarray, b: np.ndarray, voxel_ml: float, connectivity: int) -> float:
    """Volume of components of ``a`` that share no voxel with ``b``."""
    if connectivity not in _STRUCTURES:
        raise ConfigurationError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    labels, n = ndimage.label(a, structure=_STRUCTURES[connectivity])
    if n == 0:
        return 0.0
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    touched = np.zeros(n + 1, dtype=bool)
    touched[np.unique(labels[b & a])] = True
    missed = sizes[1:][~touched[1:]]
    return float(missed.sum()) * voxel_ml


def fnv(pred, gt, spacing=None, connectivity: int = CONNECTIVITY) -> float:
    """Millilitres of ground-truth components the prediction misses entirely."""
    p, g = _arrays(pred, gt)
    return _unmatched_volume(g, p, float(np.prod(_spacing(spacing, gt, pred))) / 1000.0, connectivity)


def fpv(pred, gt, spacing=None, connectivity: int = CONNECTIVITY) -> float:
    """Millilitres of predicted components with no ground-truth overlap."""
    p, g = _arrays(pred, gt)
    return _unmatched_volume(p, g, float(np.prod(_spacing(spacing, gt, pred))) / 1000.0, connectivity)


def seg_scores(pred, gt, spacing=None, connectivity: int = CONNECTIVITY) -> SegScores:
    p, g = _arrays(pred, gt)
    flags = ["both_empty"] if not p.any() and not g.any() else []
    return SegScores(dsc(p, g), fnv(p, g, _spacing(spacing, pred, gt), connectivity),
                     fpv(p, g, _spacing(spacing, pred, gt), connectivity), flags)


# ---- sliding window ---------------------------------------------------------

def window_starts(size: int, window: int, stride: int) -> list:
    """Start offsets along one axis; the last window is clamped to end at ``size``."""
    if window > size:
        raise ContractViolation(f"window {window} exceeds volume extent {size}")
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def gaussian_importance(window, sigma_scale: float = 0.125) -> np.ndarray:
    out = np.ones(window)
    for ax, w in enumerate(window):
        x = np.arange(w) - (w - 1) / 2.0
        g = np.exp(-0.5 * (x / (sigma_scale * w)) ** 2)
        shape = [1, 1, 1]
        shape[ax] = w
        out = out * g.reshape(shape)
    return out / out.max()


def sliding_window_probabilities(predictor, ct: np.ndarray, pet: np.ndarray, window=128, overlap: float = 0.5,
                                 weighting: str = "uniform") -> np.ndarray:
    """Per-voxel mean of ``predictor(ct_win, pet_win)`` over every window covering the voxel."""
    ct, pet = np.asarray(ct), np.asarray(pet)
    if ct.shape != pet.shape or ct.ndim != 3:
        raise ConsistencyError(f"CT {ct.shape} and PET {pet.shape} must be matching 3-D grids")
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must lie in [0, 1), got {overlap}")
    win = (window,) * 3 if np.isscalar(window) else tuple(int(w) for w in window)
    if any(w < 1 for w in win):
        raise ConfigurationError(f"window must be positive, got {win}")
    strides = [max(1, int(round(w * (1.0 - overlap)))) for w in win]
    axes = [window_starts(s, w, st) for s, w, st in zip(ct.shape, win, strides)]
    if weighting == "uniform":
        weight = np.ones(win)
    elif weighting == "gaussian":
        weight = gaussian_importance(win)
    else:
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    acc = np.zeros(ct.shape)
    norm = np.zeros(ct.shape)
    for i in axes[0]:
        for j in axes[1]:
            for k in axes[2]:
                sl = (slice(i, i + win[0]), slice(j, j + win[1]), slice(k, k + win[2]))
                prob = np.asarray(predictor(ct[sl], pet[sl]), dtype=np.float64)
                if prob.shape != win:
                    raise ContractViolation(f"predictor returned {prob.shape} for a {win} window")
                acc[sl] += weight * prob
                norm[sl] += weight
    return acc / norm


def sliding_window_infer(predictor, ct, pet, window=128, overlap: float = 0.5, spacing=(1.0, 1.0, 1.0),
                         threshold: float = 0.5, weighting: str = "uniform") -> BinaryMask:
    prob = sliding_window_probabilities(predictor, ct, pet, window, overlap, weighting)
    return BinaryMask(prob >= threshold, spacing)


# ---- report text ------------------------------------------------------------

BLEU_EPSILON = 0.1


@dataclass
class TextScore:
    value: float
    flags: list = field(default_factory=list)

    def __float__(self):
        return self.value


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_precision(candidate, reference, n: int) -> tuple:
    """(clipped matches, candidate n-gram count) for one order."""
    c, r = _ngrams(_tokens(candidate), n), _ngrams(_tokens(reference), n)
    return sum(min(v, r[g]) for g, v in c.items()), sum(c.values())


def bleu_score(candidate, reference, n: int = 4) -> TextScore:
    """Sentence BLEU over orders 1..n with the audit flags of any smoothing applied."""
    if n not in (1, 2, 3, 4):
        raise DomainError(f"BLEU order must be 1..4, got {n}")
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand:
        return TextScore(0.0, ["empty_candidate"])
    flags = []
    logs = []
    for k in range(1, n + 1):
        match, count = clipped_precision(cand, ref, k)
        if k == 1 and match == 0:
            return TextScore(0.0, ["no_unigram_overlap"])
        if count == 0:
            # candidate shorter than the order: nothing to score, drop it from the mean
            flags.append(f"skipped_{k}")
            continue
        if match == 0:
            flags.append(f"smoothed_{k}")
            match = BLEU_EPSILON
        logs.append(math.log(match / count))
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return TextScore(min(1.0, bp * math.exp(sum(logs) / len(logs))), flags)


def bleu_n(candidate, reference, n: int) -> float:
    return bleu_score(candidate, reference, n).value


def lcs_length(a, b) -> int:
    a, b = _tokens(a), _tokens(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """LCS F-measure ((1+b^2) P R / (R + b^2 P))."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1.0 + beta ** 2) * p * r / (r + beta ** 2 * p)


def report_scores(candidate, reference) -> dict:
    out = {f"bleu{n}": bleu_n(candidate, reference, n) for n in range(1, 5)}
    out["rouge_l"] = rouge_l(candidate, reference)
    return out


# ---- tables -----------------------------------------------------------------

SEG_COLUMNS = ("method", "dsc", "fnv", "fpv")
REPORT_COLUMNS = ("method", "bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider")
ABSENT = "n/a"


def _mean_rows(results, columns) -> list:
    if not results:
        raise DomainError("score table needs at least one scored study")
    by_method: dict = {}
    for row in results:
        by_method.setdefault(row["method"], []).append(row)
    out = []
    for method, rows in by_method.items():
        entry = {"method": method}
        for col in columns[1:]:
            vals = [r[col] for r in rows if r.get(col) is not None]
            entry[col] = float(np.mean(vals)) if vals else None
        out.append(entry)
    return out


def score_table(results, columns=SEG_COLUMNS) -> list:
    """Per-method means of per-study rows (dicts with a ``method`` key)."""
    return _mean_rows(list(results), columns)


def table_csv(rows, columns=SEG_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row["method"]] + [ABSENT if row.get(c) is None else f"{row[c]:.4f}" for c in columns[1:]])
    return buf.getvalue()
