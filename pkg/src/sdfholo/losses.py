"""Training objectives: masked reconstruction, report LM, region classification, anchor InfoNCE.

Every term is normalised to a mean by default (per voxel, per token, per region,
per class) so the weights mean the same thing at any batch size. Passing
``reduction="sum"`` gives the unnormalised sums instead.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, ContractViolation
from .tensorcore import Tensor

log = logging.getLogger(__name__)

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossWeights:
    mim: float = 1.0
    lm: float = 1.0
    gac: float = 0.1
    anchor: float = 0.5
    omega_pet: float = 3.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {v}")

    @property
    def lambdas(self) -> tuple:
        return (self.mim, self.lm, self.gac, self.anchor)


@dataclass
class LossReport:
    mim: float
    lm: float
    gac: float
    anchor: float
    total: float
    counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def recomposed(self, weights: LossWeights) -> float:
        return loss_total((self.mim, self.lm, self.gac, self.anchor), weights)

    def to_json(self) -> dict:
        return {"L_MIM": self.mim, "L_LM": self.lm, "L_GAC": self.gac, "L_A": self.anchor,
                "L_total": self.total, "counts": dict(self.counts), "skipped": list(self.skipped)}


def _check_reduction(reduction):
    if reduction not in REDUCTIONS:
        raise ConfigurationError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def _as_list(x):
    return list(x) if isinstance(x, list) else [x]


def loss_mim(pred_ct, pred_pet, target_ct, target_pet, masked, omega_pet: float = 3.0,
             reduction: str = "mean") -> Tensor:
    """Squared error on masked patches, PET weighted by ``omega_pet``.

    Arguments may be single regions or lists of regions. Predictions are
    N x 4096 tensors over every patch; targets are arrays of the same shape;
    ``masked`` indexes the hidden rows. The region sums are pooled and divided
    by the total masked-voxel count.
    """
    _check_reduction(reduction)
    if isinstance(pred_ct, list):
        pc, pp, tct, tpt, ms = map(_as_list, (pred_ct, pred_pet, target_ct, target_pet, masked))
    else:  # single region; ``masked`` may itself be a plain list of rows
        pc, pp, tct, tpt, ms = [pred_ct], [pred_pet], [target_ct], [target_pet], [masked]
    if not len(pc) == len(pp) == len(tct) == len(tpt) == len(ms):
        raise ContractViolation("loss_mim: per-region argument lists differ in length")
    total, count = None, 0
    for xc, xp, yc, yp, m in zip(pc, pp, tct, tpt, ms):
        m = np.asarray(m, dtype=np.int64)
        if m.size == 0:
            raise ContractViolation("loss_mim: empty masked set")
        yc, yp = np.asarray(yc, dtype=np.float64), np.asarray(yp, dtype=np.float64)
        if xc.shape != yc.shape or xp.shape != yp.shape:
            raise ContractViolation(f"loss_mim: prediction {xc.shape} vs target {yc.shape}")
        dc = tc.take(xc, m) - Tensor(yc[m])
        dp = tc.take(xp, m) - Tensor(yp[m])
        term = tc.sum(dc * dc) + omega_pet * tc.sum(dp * dp)
        total = term if total is None else total + term
        count += m.size * yc.shape[1]
    return total if reduction == "sum" else total * (1.0 / count)


def loss_lm(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` (aligned row by row with ``logits``)."""
    _check_reduction(reduction)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or len(t) != logits.shape[0]:
        raise ContractViolation(f"loss_lm: {logits.shape[0] if logits.ndim else 0} logit rows for {len(t)} targets")
    ce = tc.cross_entropy(logits, t)
    return ce if reduction == "mean" else ce * float(len(t))


def loss_gac(region_logits, region_ids, reduction: str = "mean") -> Tensor:
    """Cross-entropy of per-region logits against the true region index."""
    _check_reduction(reduction)
    rows = [tc.reshape(l, (1, -1)) for l in region_logits]
    if not rows:
        raise ContractViolation("loss_gac: no regions")
    ce = tc.cross_entropy(tc.concat(rows, axis=0), region_ids)
    return ce if reduction == "mean" else ce * float(len(rows))


def loss_anchor(visual: dict, text: dict, tau: float = 0.1, reduction: str = "mean"):
    """InfoNCE with visual anchors as queries and every text anchor as a key.

    ``visual`` and ``text`` map class id -> unit-norm anchor (1-D Tensor).
    Classes missing either anchor contribute no query. Returns
    ``(loss, n_pairs)``; with no matched pair the loss is a constant 0.
    """
    _check_reduction(reduction)
    if tau <= 0:
        raise ConfigurationError("temperature must be positive")
    matched = [c for c in sorted(visual) if c in text]
    if not matched:
        log.warning("anchor loss skipped: no class has both a visual and a text anchor")
        return Tensor(0.0), 0
    keys = sorted(text)
    t_mat = tc.stack_rows([text[c] for c in keys])
    v_mat = tc.stack_rows([visual[c] for c in matched])
    logits = tc.matmul(v_mat, tc.transpose(t_mat)) * (1.0 / tau)
    targets = [keys.index(c) for c in matched]
    ce = tc.cross_entropy(logits, targets)
    return (ce if reduction == "mean" else ce * float(len(matched))), len(matched)


def loss_total(terms, weights: LossWeights):
    """Weighted sum of (MIM, LM, GAC, anchor); works on floats or Tensors."""
    out = 0.0
    for lam, term in zip(weights.lambdas, terms):
        if lam == 0.0:
            continue
        out = term * lam + out if isinstance(term, Tensor) else out + lam * term
    return out


def study_batch_losses(outputs: list, preps: list, masks: list, weights: LossWeights,
                       tau: float, reduction: str = "mean"):
    """All four terms over a minibatch of studies.

    MIM and LM pool their sums over the whole batch before normalising; GAC
    averages over every region of every study; the anchor term is computed
    per study (its own classes form the negatives) and averaged over studies
    that have at least one matched pair. Returns ``(total, terms, report)``.
    """
    pred_ct, pred_pet, tgt_ct, tgt_pet, masked = [], [], [], [], []
    lm_logits, lm_targets = [], []
    region_logits, region_ids = [], []
    anchors, pairs = [], 0
    for out, prep, mk in zip(outputs, preps, masks):
        for ro, region, (_, m) in zip(out.regions, prep.regions, mk):
            if len(m):
                pred_ct.append(ro.decoder.x_ct)
                pred_pet.append(ro.decoder.x_pet)
                tgt_ct.append(region.ct)
                tgt_pet.append(region.pet)
                masked.append(m)
            region_logits.append(ro.region_logits)
            region_ids.append(region.index)
        if out.lm_logits is not None:
            lm_logits.append(out.lm_logits)
            lm_targets.append(prep.tokens[1:])
        la, n = loss_anchor(out.visual_anchors, out.text_anchors, tau, reduction)
        if n:
            anchors.append(la)
            pairs += n

    skipped = []
    if masked:
        l_mim = loss_mim(pred_ct, pred_pet, tgt_ct, tgt_pet, masked, weights.omega_pet, reduction)
    else:
        l_mim, skipped = Tensor(0.0), skipped + ["mim"]
    if lm_logits:
        l_lm = loss_lm(tc.concat(lm_logits, axis=0), np.concatenate(lm_targets), reduction)
    else:
        l_lm, skipped = Tensor(0.0), skipped + ["lm"]
    l_gac = loss_gac(region_logits, region_ids, reduction)
    if anchors:
        l_a = anchors[0]
        for a in anchors[1:]:
            l_a = l_a + a
        if reduction == "mean":
            l_a = l_a * (1.0 / len(anchors))
    else:
        l_a, skipped = Tensor(0.0), skipped + ["anchor"]

    terms = (l_mim, l_lm, l_gac, l_a)
    total = loss_total(terms, weights)
    if not isinstance(total, Tensor):
        total = Tensor(total)
    counts = {
        "masked_voxels": int(sum(len(m) * t.shape[1] for m, t in zip(masked, tgt_ct))),
        "lm_tokens": int(sum(len(t) for t in lm_targets)),
        "regions": len(region_ids),
        "anchor_pairs": pairs,
        "anchor_studies": len(anchors),
    }
    vals = [float(t.data) for t in terms]
    report = LossReport(*vals, total=float(total.data), counts=counts, skipped=skipped)
    return total, terms, report
