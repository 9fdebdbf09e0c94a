"""Optimisers, the pre-training loop and the training-set probes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, NumericError
from .losses import LossWeights, study_batch_losses
from .model.prepare import sample_study_masks

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adamw")


@dataclass
class TrainConfig:
    steps: int = 200
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    seed: int = 0
    reduction: str = "mean"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.steps < 0 or self.lr <= 0:
            raise ConfigurationError("steps must be >= 0 and lr > 0")
        if not 0 <= self.momentum < 1 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError("momentum and betas must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class SGD:
    """Heavy-ball momentum with optional decoupled weight decay."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * v


class AdamW:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # one dict per step

    @property
    def totals(self) -> list:
        return [h["L_total"] for h in self.history]


def training_step(model, preps, step: int, weights: LossWeights, cfg: TrainConfig):
    """Forward + backward over every study; returns (total tensor, LossReport, masks)."""
    masks = [sample_study_masks(p, model.config.mask_ratio, cfg.seed, step, i) for i, p in enumerate(preps)]
    outputs = [model.forward_study(p, mk) for p, mk in zip(preps, masks)]
    total, _, report = study_batch_losses(outputs, preps, masks, weights, model.config.temperature,
                                          cfg.reduction)
    return total, report, masks


def train(model, preps, cfg: TrainConfig | None = None, weights: LossWeights | None = None,
          log_path=None) -> TrainResult:
    """Full-batch pre-training; each line of ``log_path`` is one step's LossReport."""
    cfg = cfg or TrainConfig()
    weights = weights or LossWeights()
    params = model.parameters()
    opt = make_optimizer(params, cfg)
    result = TrainResult()
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(cfg.steps):
            model.zero_grad()
            total, report, _ = training_step(model, preps, step, weights, cfg)
            last = result.history[-1] if result.history else None
            if not np.isfinite(report.total):
                raise NumericError(f"non-finite loss at step {step}; last finite report: {last}")
            total.backward()
            grad_norm = clip_gradients(params, cfg.clip_norm if cfg.clip_norm else np.inf)
            if not np.isfinite(grad_norm):
                raise NumericError(f"non-finite gradient at step {step}; last finite report: {last}")
            opt.step()
            entry = {"step": step, **report.to_json(), "grad_norm": grad_norm}
            result.history.append(entry)
            if fh is not None:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
                fh.flush()
            log.debug("step %d total %.6f", step, report.total)
    finally:
        if fh is not None:
            fh.close()
    return result


# ---- probes -----------------------------------------------------------------

EVAL_KEY = 1_000_003


def region_accuracy(model, preps, seed: int = 0) -> float:
    """Argmax region prediction accuracy under a fresh synchronized mask per region."""
    hits, total = 0, 0
    with tc.no_grad():
        for i, prep in enumerate(preps):
            masks = sample_study_masks(prep, model.config.mask_ratio, seed, EVAL_KEY, i)
            out = model.forward_study(prep, masks, decode=False)
            for ro, region in zip(out.regions, prep.regions):
                hits += int(np.argmax(ro.region_logits.data) == region.index)
                total += 1
    return hits / total


def anchor_similarities(model, preps) -> dict:
    """Cosine similarities of matched and mismatched (v_c, t_c') pairs, all tokens visible."""
    matched, mismatched = [], []
    with tc.no_grad():
        for prep in preps:
            out = model.forward_study(prep, None, decode=False)
            v, t = out.visual_anchors, out.text_anchors
            classes = sorted(set(v) & set(t))
            for c in classes:
                for c2 in classes:
                    s = float(v[c].data @ t[c2].data)
                    (matched if c == c2 else mismatched).append(s)
    return {
        "matched": float(np.mean(matched)) if matched else float("nan"),
        "mismatched": float(np.mean(mismatched)) if mismatched else float("nan"),
        "n_matched": len(matched),
        "n_mismatched": len(mismatched),
    }


def anchor_separation(model, preps) -> float:
    s = anchor_similarities(model, preps)
    return s["matched"] - s["mismatched"]
