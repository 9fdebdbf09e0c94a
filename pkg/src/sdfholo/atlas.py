"""Healthy metabolic atlas: organ features, age strata, covariance differences,
correlation networks and system-level trends."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import anatomy
from . import tensorcore as tc
from .errors import ConsistencyError, DomainError

log = logging.getLogger(__name__)

STRATA = {"young": (12, 45), "middle": (46, 65), "old": (66, 82)}
SPLIT_AGE = 55
R_THRESHOLD = 0.5
FDR_ALPHA = 0.05
MIN_PAIR_N = 3
STRATA_ORDER = ("young", "lower_middle", "middle", "upper_middle", "old")
TREND_PAIRS = (("young", "old"), ("young", "middle"), ("middle", "old"))


# ---- containers -------------------------------------------------------------

@dataclass
class OrganFeatureMatrix:
    """Subjects x organs (x k for embeddings); NaN marks an absent organ."""

    values: np.ndarray
    organ_ids: list
    ages: np.ndarray
    subject_ids: list = None
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.organ_ids = [int(c) for c in self.organ_ids]
        self.ages = np.asarray(self.ages, dtype=np.float64)
        if self.subject_ids is None:
            self.subject_ids = [f"s{i:04d}" for i in range(len(self.ages))]
        if self.values.ndim not in (2, 3) or self.values.shape[:2] != (len(self.ages), len(self.organ_ids)):
            raise ConsistencyError(f"feature shape {self.values.shape} does not match "
                                   f"{len(self.ages)} subjects x {len(self.organ_ids)} organs")
        if len(set(self.organ_ids)) != len(self.organ_ids):
            raise ConsistencyError("duplicate organ columns")

    def rows(self, idx) -> "OrganFeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, values=self.values[idx], ages=self.ages[idx],
                       subject_ids=[self.subject_ids[i] for i in idx], excluded=list(self.excluded))


@dataclass
class OrganMatrix:
    """Square organ x organ matrix with its labels; NaN marks an absent entry."""

    values: np.ndarray
    organ_ids: list
    excluded: list = field(default_factory=list)


@dataclass
class AgeStrata:
    groups: dict  # name -> row indices
    rejected: list = field(default_factory=list)  # (row, age)

    def members(self, name) -> np.ndarray:
        return np.asarray(self.groups[name], dtype=np.int64)


@dataclass
class CovarianceDifference:
    difference: OrganMatrix
    ranking: list  # (organ_a, organ_b, d) sorted by |d| descending

    @property
    def top_entry(self):
        return self.ranking[0] if self.ranking else None

    @property
    def organ_ids(self) -> list:
        return self.difference.organ_ids

    @property
    def excluded(self) -> list:
        return self.difference.excluded


@dataclass
class InteractionNetwork:
    nodes: list
    edges: list  # dicts: a, b, r, p, q, sign, n
    degree: dict
    tested: int
    r_threshold: float
    alpha: float
    notes: list = field(default_factory=list)

    def edge_set(self) -> set:
        return {(e["a"], e["b"]) for e in self.edges}

    def to_json(self) -> dict:
        return {"nodes": self.nodes, "edges": self.edges, "degree": {str(k): v for k, v in self.degree.items()},
                "tested_pairs": self.tested, "r_threshold": self.r_threshold, "fdr_alpha": self.alpha,
                "notes": self.notes}


# ---- organ features ---------------------------------------------------------

def organ_suv_mean(pet, mask, cls) -> float | None:
    """Mean PET value over the voxels labelled ``cls``; None when the organ is absent."""
    p = pet.values if hasattr(pet, "values") else np.asarray(pet)
    m = mask.labels if hasattr(mask, "labels") else np.asarray(mask)
    if p.shape != m.shape:
        raise ConsistencyError(f"PET grid {p.shape} differs from mask grid {m.shape}")
    sel = m == anatomy.resolve_class(cls)
    if not sel.any():
        return None
    return float(np.asarray(p, dtype=np.float64)[sel].mean())


def suv_features(studies, organ_ids=None, subject_ids=None) -> OrganFeatureMatrix:
    studies = list(studies)
    if organ_ids is None:
        organ_ids = sorted({c for s in studies for c in s.mask.classes()})
    vals = np.full((len(studies), len(organ_ids)), np.nan)
    for i, s in enumerate(studies):
        for j, c in enumerate(organ_ids):
            v = organ_suv_mean(s.pet, s.mask, c)
            if v is not None:
                vals[i, j] = v
    return OrganFeatureMatrix(vals, organ_ids, [s.subject_age for s in studies], subject_ids)


def organ_embeddings(model, prep) -> dict:
    """class -> atlas-head projection of the mean fused token of that class (all tokens visible)."""
    pooled: dict = {}
    for f_vis, dominant in model.fused_tokens(prep):
        for c in np.unique(dominant):
            if c != 0:
                pooled.setdefault(int(c), []).append(f_vis[dominant == c])
    out = {}
    with tc.no_grad():
        for c, chunks in pooled.items():
            mean = np.concatenate(chunks).mean(axis=0, keepdims=True)
            out[c] = model.atlas_head(tc.Tensor(mean)).data[0]
    return out


def organ_embedding(model, prep, cls) -> np.ndarray | None:
    return organ_embeddings(model, prep).get(anatomy.resolve_class(cls))


def embedding_features(model, preps, organ_ids, subject_ids=None) -> OrganFeatureMatrix:
    dim = model.config.atlas_dim
    vals = np.full((len(preps), len(organ_ids), dim), np.nan)
    for i, prep in enumerate(preps):
        emb = organ_embeddings(model, prep)
        for j, c in enumerate(organ_ids):
            if c in emb:
                vals[i, j] = emb[c]
    return OrganFeatureMatrix(vals, organ_ids, [p.age for p in preps], subject_ids)


def first_component(fm: OrganFeatureMatrix) -> OrganFeatureMatrix:
    """Reduce each organ's k-d embedding to its score on the cohort's first principal axis.

    The axis sign is fixed so the loadings sum to a non-negative number.
    """
    if fm.values.ndim != 3:
        return fm
    out = np.full(fm.values.shape[:2], np.nan)
    for j in range(fm.values.shape[1]):
        x = fm.values[:, j, :]
        ok = ~np.isnan(x).any(axis=1)
        if ok.sum() < 2:
            continue
        xc = x[ok] - x[ok].mean(axis=0)
        _, _, vt = np.linalg.svd(xc, full_matrices=False)
        axis = vt[0] if vt[0].sum() >= 0 else -vt[0]
        out[ok, j] = xc @ axis
    return replace(fm, values=out, excluded=list(fm.excluded))


# ---- strata -----------------------------------------------------------------

def stratify(ages, split_middle: bool = False, bounds=None) -> AgeStrata:
    """Closed-interval age groups; ages outside every interval are rejected and listed."""
    bounds = dict(bounds or STRATA)
    if split_middle:
        lo, hi = bounds.pop("middle")
        bounds = {"young": bounds["young"], "lower_middle": (lo, SPLIT_AGE),
                  "upper_middle": (SPLIT_AGE + 1, hi), "old": bounds["old"]}
    groups = {name: [] for name in bounds}
    rejected = []
    for i, a in enumerate(np.asarray(ages, dtype=np.float64)):
        hit = [name for name, (lo, hi) in bounds.items() if lo <= a <= hi]
        if len(hit) == 1:
            groups[hit[0]].append(i)
        elif not hit:
            rejected.append((i, float(a)))
        else:
            raise ConsistencyError(f"age {a} falls in overlapping strata {hit}")
    if rejected:
        log.warning("subjects outside the stratum bounds: %s", rejected)
    return AgeStrata(groups, rejected)


# ---- covariance -------------------------------------------------------------

def _values(x):
    if isinstance(x, OrganFeatureMatrix):
        if x.values.ndim != 2:
            raise DomainError("covariance needs scalar features; reduce embeddings with first_component")
        return x.values
    return np.asarray(x, dtype=np.float64)


def pairwise_covariance(x, y) -> float:
    """Two-pass sample covariance (n-1) over rows where both are present; NaN below 2 rows."""
    ok = ~(np.isnan(x) | np.isnan(y))
    n = int(ok.sum())
    if n < 2:
        return float("nan")
    xs, ys = x[ok], y[ok]
    return float(((xs - xs.mean()) * (ys - ys.mean())).sum() / (n - 1))


def covariance_matrix(features, organ_subset=None) -> np.ndarray:
    """Pairwise-complete sample covariance of the organ columns."""
    v = _values(features)
    if organ_subset is not None:
        v = v[:, _column_index(features, organ_subset)]
    k = v.shape[1]
    if not np.isnan(v).any():
        if v.shape[0] < 2:
            return np.full((k, k), np.nan)
        c = v - v.mean(axis=0)
        cov = c.T @ c / (v.shape[0] - 1)
        return (cov + cov.T) / 2.0
    cov = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            cov[i, j] = cov[j, i] = pairwise_covariance(v[:, i], v[:, j])
    return cov


def _column_index(features, organ_subset) -> list:
    ids = features.organ_ids
    missing = [c for c in organ_subset if c not in ids]
    if missing:
        raise ConsistencyError(f"organs {missing} are not columns of the feature matrix")
    return [ids.index(c) for c in organ_subset]


def rank_pairs(matrix: np.ndarray, organ_ids, top_k: int = 20) -> list:
    """Unique pairs (diagonal included) ordered by |value| descending, ties by position."""
    iu, ju = np.triu_indices(len(organ_ids))
    vals = matrix[iu, ju]
    ok = ~np.isnan(vals)
    iu, ju, vals = iu[ok], ju[ok], vals[ok]
    order = np.lexsort((np.arange(len(vals)), -np.abs(vals)))[:top_k]
    return [(organ_ids[iu[o]], organ_ids[ju[o]], float(vals[o])) for o in order]


def covariance_difference(group_a: OrganFeatureMatrix, group_b: OrganFeatureMatrix, organ_subset=None,
                          top_k: int = 20) -> CovarianceDifference:
    """Cov(A) - Cov(B) over a shared organ subset plus the top-k pairs by |difference|."""
    if group_a.organ_ids != group_b.organ_ids:
        raise ConsistencyError("groups have different organ columns")
    ids = list(organ_subset) if organ_subset is not None else list(group_a.organ_ids)
    d = covariance_matrix(group_a, ids) - covariance_matrix(group_b, ids)
    excluded = sorted(set(group_a.excluded) | set(group_b.excluded))
    return CovarianceDifference(OrganMatrix(d, ids, excluded), rank_pairs(d, ids, top_k))


def exclude_organs(obj, classes):
    """Drop organ columns (and rows, for matrices); the exclusion is recorded on the result."""
    drop = [anatomy.resolve_class(c) for c in classes]
    if not drop:
        return obj
    ids = obj.organ_ids
    unknown = [c for c in drop if c not in ids]
    if unknown:
        names = ", ".join(f"{c} ({anatomy.class_name(c)})" for c in unknown)
        raise ConsistencyError(f"cannot exclude organs not present: {names}")
    keep = [i for i, c in enumerate(ids) if c not in drop]
    if not keep:
        raise ConsistencyError("excluding every organ leaves nothing to analyse")
    new_ids = [ids[i] for i in keep]
    excluded = list(obj.excluded) + drop
    if isinstance(obj, OrganFeatureMatrix):
        return replace(obj, values=obj.values[:, keep], organ_ids=new_ids, excluded=excluded)
    if isinstance(obj, CovarianceDifference):
        m = exclude_organs(obj.difference, classes)
        return CovarianceDifference(m, rank_pairs(m.values, m.organ_ids, max(len(obj.ranking), 1)))
    return OrganMatrix(obj.values[np.ix_(keep, keep)], new_ids, excluded)


# ---- correlation network ----------------------------------------------------

def pearson(x, y) -> tuple:
    """(r, two-sided p, n) on pairwise-complete rows; r is NaN for a zero-variance column."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    ok = ~(np.isnan(x) | np.isnan(y))
    n = int(ok.sum())
    if n < 2:
        return float("nan"), float("nan"), n
    xs, ys = x[ok] - x[ok].mean(), y[ok] - y[ok].mean()
    sxx, syy = float((xs * xs).sum()), float((ys * ys).sum())
    if sxx == 0.0 or syy == 0.0:
        return float("nan"), float("nan"), n
    r = float(np.clip((xs * ys).sum() / np.sqrt(sxx * syy), -1.0, 1.0))
    return r, pearson_p(r, n), n


def pearson_p(r: float, n: int) -> float:
    """Two-sided p of H0: rho = 0 via t = r sqrt((n-2)/(1-r^2)) on n-2 degrees of freedom."""
    if n < 3:
        return float("nan")
    if abs(r) >= 1.0:
        return 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def bh_fdr(pvals, alpha: float = FDR_ALPHA) -> tuple:
    """Benjamini-Hochberg step-up; returns (significant flags, q-values) in input order."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise DomainError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    below = np.flatnonzero(ranked <= np.arange(1, m + 1) / m * alpha)
    flags = np.zeros(m, dtype=bool)
    if below.size:
        flags[order[:below[-1] + 1]] = True
    q_sorted = np.minimum.accumulate((ranked * m / np.arange(1, m + 1))[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return flags, q


def _is_flat(col) -> bool:
    vals = col[~np.isnan(col)]
    return vals.size >= 2 and bool(np.all(vals == vals[0]))


def correlation_network(features, organ_ids=None, r_threshold: float = R_THRESHOLD,
                        alpha: float = FDR_ALPHA, min_n: int = MIN_PAIR_N) -> InteractionNetwork:
    """Edges with |r| >= r_threshold and BH q < alpha over every testable organ pair."""
    v = _values(features)
    ids = list(organ_ids if organ_ids is not None else features.organ_ids)
    notes, pairs, rs, ps, ns = [], [], [], [], []
    flat = [j for j in range(len(ids)) if _is_flat(v[:, j])]
    for j in flat:
        notes.append(f"organ {ids[j]} has zero variance; its pairs are skipped")
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if i in flat or j in flat:
                continue
            r, p, n = pearson(v[:, i], v[:, j])
            if n < min_n or np.isnan(r):
                notes.append(f"pair ({ids[i]}, {ids[j]}) has {n} complete subjects; skipped")
                continue
            pairs.append((i, j))
            rs.append(r)
            ps.append(p)
            ns.append(n)
    _, q = bh_fdr(ps, alpha)
    edges = []
    degree = {c: 0 for c in ids}
    for (i, j), r, p, qq, n in zip(pairs, rs, ps, q, ns):
        if abs(r) >= r_threshold and qq < alpha:
            edges.append({"a": ids[i], "b": ids[j], "r": r, "p": p, "q": float(qq),
                          "sign": "positive" if r > 0 else "negative", "n": n})
            degree[ids[i]] += 1
            degree[ids[j]] += 1
    return InteractionNetwork(ids, edges, degree, len(pairs), r_threshold, alpha, notes)


# ---- systems ----------------------------------------------------------------

def default_system_map() -> dict:
    return dict(anatomy.SYSTEM_OF)


def load_system_map(path) -> dict:
    payload = json.loads(Path(path).read_text())
    out = {}
    for k, v in payload.items():
        if v not in anatomy.SYSTEMS:
            raise ConsistencyError(f"unknown system {v!r} for organ {k}")
        out[anatomy.resolve_class(int(k) if str(k).isdigit() else k)] = v
    return out


def save_system_map(path, system_map=None):
    m = system_map or default_system_map()
    Path(path).write_text(json.dumps({str(k): m[k] for k in sorted(m)}, indent=1))


def percent_change(m_from: float, m_to: float) -> float:
    """Decline from ``m_from`` to ``m_to`` as a percentage of ``m_from`` (positive = decrease)."""
    if m_from == 0:
        return float("nan")
    return (m_from - m_to) / m_from * 100.0


def system_trends(features: OrganFeatureMatrix, strata: AgeStrata, system_map=None) -> dict:
    """Per system: mean intensity per stratum and percent changes between strata.

    A subject's system intensity is the mean over its present member organs; the
    stratum value is the mean over subjects that have any member organ.
    """
    system_map = system_map or default_system_map()
    v = _values(features)
    out = {}
    for system in anatomy.SYSTEMS:
        cols = [j for j, c in enumerate(features.organ_ids) if system_map.get(c) == system]
        entry = {"means": {}, "changes": {}, "notes": []}
        if not cols:
            entry["notes"].append("no member organs present")
            out[system] = entry
            continue
        sub = v[:, cols]
        present = ~np.isnan(sub).all(axis=1)
        per_subject = np.full(len(v), np.nan)
        per_subject[present] = np.nanmean(sub[present], axis=1)
        for name, rows in strata.groups.items():
            vals = per_subject[np.asarray(rows, dtype=np.int64)]
            vals = vals[~np.isnan(vals)]
            entry["means"][name] = float(vals.mean()) if vals.size else None
        for a, b in TREND_PAIRS:
            ma, mb = entry["means"].get(a), entry["means"].get(b)
            if ma is not None and mb is not None:
                entry["changes"][f"{a}->{b}"] = percent_change(ma, mb)
        out[system] = entry
    return out


# ---- writers ----------------------------------------------------------------

def write_matrix_csv(matrix: OrganMatrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["organ"] + [str(c) for c in matrix.organ_ids])
        for c, row in zip(matrix.organ_ids, matrix.values):
            w.writerow([str(c)] + ["" if np.isnan(x) else f"{x:.4f}" for x in row])


def write_ranking_csv(ranking, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["organ_a", "name_a", "organ_b", "name_b", "difference"])
        for a, b, d in ranking:
            w.writerow([a, anatomy.class_name(a), b, anatomy.class_name(b), f"{d:.4f}"])


def write_trends_csv(trends: dict, path):
    present = {s for e in trends.values() for s in e["means"]}
    strata = [s for s in STRATA_ORDER if s in present] + sorted(present - set(STRATA_ORDER))
    changes = [f"{a}->{b}" for a, b in TREND_PAIRS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system"] + [f"mean_{s}" for s in strata] + [f"pct_{c}" for c in changes])
        for system, e in trends.items():
            row = [system]
            row += ["" if e["means"].get(s) is None else f"{e['means'][s]:.4f}" for s in strata]
            row += ["" if c not in e["changes"] else f"{e['changes'][c]:.4f}" for c in changes]
            w.writerow(row)
