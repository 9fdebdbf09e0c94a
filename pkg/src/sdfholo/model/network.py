"""Dual-stream PET/CT masked autoencoder with text anchoring and whole-body aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensorcore as tc
from ..errors import ConfigurationError, ContractViolation, ShapeError
from ..rng import make_rng
from ..tensorcore import Tensor
from .layers import (
    Block,
    CrossModalInteraction,
    DecoderBlock,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sincos_1d,
    sincos_3d,
)
from .tokens import PATCH, PATCH_VOXELS


@dataclass
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    depth: int = 6
    decoder_depth: int = 2
    gaa_depth: int = 2
    text_depth: int = 2
    lm_depth: int = 2
    mlp_ratio: int = 4
    patch_size: int = PATCH
    mask_ratio: float = 0.90
    cmim_depths: tuple = (1.0 / 3.0, 2.0 / 3.0)
    temperature: float = 0.1
    vocab_size: int = 215
    regions: int = 6
    ct_window: tuple = (-1000.0, 1000.0)
    pet_scale: float = 5.0
    pet_cap: float = 2.0
    inject_text: bool = True
    gaa_residual_init: float = 0.0
    atlas_dim: int = 16

    def __post_init__(self):
        self.cmim_depths = tuple(float(f) for f in self.cmim_depths)
        self.ct_window = tuple(float(v) for v in self.ct_window)
        self.validate()

    def validate(self):
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.patch_size != PATCH:
            raise ConfigurationError(f"patch size is fixed at {PATCH}, got {self.patch_size}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")
        if any(not 0.0 < f < 1.0 for f in self.cmim_depths) or len(set(self.cmim_depths)) != len(self.cmim_depths):
            raise ConfigurationError(f"CMIM depths must be distinct fractions in (0, 1): {self.cmim_depths}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.depth < 1 or self.regions < 1 or self.vocab_size < 4:
            raise ConfigurationError("depth, regions and vocab_size must be positive")

    def cmim_blocks(self) -> tuple:
        """1-indexed encoder blocks after which a CMIM is applied."""
        return tuple(sorted({max(1, math.floor(f * self.depth)) for f in self.cmim_depths}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmim_depths"] = list(self.cmim_depths)
        d["ct_window"] = list(self.ct_window)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


@dataclass
class TokenBatch:
    region: int
    visible: np.ndarray
    masked: np.ndarray
    coords: np.ndarray  # all N patch coordinates
    dominant: np.ndarray  # all N dominant classes
    z_ct: Tensor
    z_pet: Tensor

    @property
    def visible_classes(self) -> np.ndarray:
        return self.dominant[self.visible]


@dataclass
class TextEmbedding:
    e_text: Tensor | None  # L_t x d
    spans: dict  # class id -> [(start, end)]


@dataclass
class GlobalFeature:
    f_local: list
    s_global: Tensor
    contextual: Tensor
    f_whole: Tensor
    lengths: list


@dataclass
class DecoderState:
    h_dec: Tensor
    x_ct: Tensor
    x_pet: Tensor


@dataclass
class RegionOutputs:
    batch: TokenBatch
    f_ct: Tensor
    f_pet: Tensor
    f_vis: Tensor
    f_local: Tensor
    region_logits: Tensor
    decoder: DecoderState | None
    visual_anchors: dict


@dataclass
class StudyOutputs:
    regions: list
    text: TextEmbedding
    global_feature: GlobalFeature
    lm_logits: Tensor | None
    visual_anchors: dict = field(default_factory=dict)
    text_anchors: dict = field(default_factory=dict)


class DualStreamEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.embed_dim
        self.ct_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.pet_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.cmim_after = cfg.cmim_blocks()
        self.cmim = [CrossModalInteraction(rng, d, cfg.heads) for _ in self.cmim_after]
        self.ct_norm = LayerNorm(d)
        self.pet_norm = LayerNorm(d)

    def single(self, z: Tensor, modality: str) -> Tensor:
        blocks = self.ct_blocks if modality == "CT" else self.pet_blocks
        norm = self.ct_norm if modality == "CT" else self.pet_norm
        for blk in blocks:
            z = blk(z)
        return norm(z)

    def __call__(self, z_ct: Tensor, z_pet: Tensor):
        if z_ct.shape != z_pet.shape:
            raise ContractViolation(f"CT/PET token sets differ: {z_ct.shape} vs {z_pet.shape}")
        for i, (bc, bp) in enumerate(zip(self.ct_blocks, self.pet_blocks), start=1):
            z_ct, z_pet = bc(z_ct), bp(z_pet)
            if i in self.cmim_after:
                z_ct, z_pet = self.cmim[self.cmim_after.index(i)](z_ct, z_pet)
        return self.ct_norm(z_ct), self.pet_norm(z_pet)


def _embedding(rng, n: int, d: int) -> Tensor:
    return tc.parameter(rng.uniform(-0.5, 0.5, size=(n, d)))


class SDFHolo(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        cfg = config
        d = cfg.embed_dim
        rng = make_rng(seed, 7)
        self.proj_ct = Linear(rng, PATCH_VOXELS, d)
        self.proj_pet = Linear(rng, PATCH_VOXELS, d)
        self.encoder = DualStreamEncoder(rng, cfg)
        self.fusion_logit = tc.parameter(np.array(0.0))

        self.text_embed = _embedding(rng, cfg.vocab_size, d)
        self.text_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_depth)]
        self.text_norm = LayerNorm(d)
        self.text_inject = MultiHeadAttention(rng, d, cfg.heads)

        self.anatomy_embed = _embedding(rng, cfg.regions, d)
        self.gaa_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio, residual_scale=cfg.gaa_residual_init)
                           for _ in range(cfg.gaa_depth)]

        self.decoder_embed = Linear(rng, d, d)
        self.mask_token = tc.parameter(rng.uniform(-0.5, 0.5, size=(1, d)))
        self.decoder_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(d)
        self.head_ct = Linear(rng, d, PATCH_VOXELS)
        self.head_pet = Linear(rng, d, PATCH_VOXELS)

        self.lm_embed = _embedding(rng, cfg.vocab_size, d)
        self.lm_blocks = [DecoderBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.lm_depth)]
        self.lm_norm = LayerNorm(d)
        self.lm_head = Linear(rng, d, cfg.vocab_size)

        self.region_head = Linear(rng, d, cfg.regions)
        # projection for atlas organ embeddings; no training loss reaches it
        self.atlas_head = Linear(rng, d, cfg.atlas_dim)

    # ---- visual stream -------------------------------------------------------

    def embed_tokens(self, patches: np.ndarray, coords: np.ndarray, modality: str) -> Tensor:
        proj = self.proj_ct if modality == "CT" else self.proj_pet
        pos = Tensor(sincos_3d(coords, self.config.embed_dim))
        return proj(Tensor(patches)) + pos

    def make_batch(self, region, visible: np.ndarray, masked: np.ndarray) -> TokenBatch:
        """``region`` exposes ct/pet (N x 4096 normalised), coords, dominant, index."""
        n = len(region.coords)
        if len(np.intersect1d(visible, masked)) or len(visible) + len(masked) != n:
            raise ContractViolation("visible and masked index sets must partition the patches")
        z_ct = self.embed_tokens(region.ct[visible], region.coords[visible], "CT")
        z_pet = self.embed_tokens(region.pet[visible], region.coords[visible], "PET")
        return TokenBatch(region.index, visible, masked, region.coords, region.dominant, z_ct, z_pet)

    def encode_dual(self, z_ct: Tensor, z_pet: Tensor):
        return self.encoder(z_ct, z_pet)

    def encode_single(self, z: Tensor, modality: str) -> Tensor:
        return self.encoder.single(z, modality)

    def fuse_streams(self, f_ct: Tensor, f_pet: Tensor) -> Tensor:
        if f_ct.shape != f_pet.shape:
            raise ShapeError(f"stream shapes differ: {f_ct.shape} vs {f_pet.shape}")
        return f_ct + tc.sigmoid(self.fusion_logit) * f_pet

    @staticmethod
    def pool_visual_anchor(f_vis: Tensor, token_classes: np.ndarray, cls: int) -> Tensor | None:
        idx = np.flatnonzero(np.asarray(token_classes) == cls)
        if idx.size == 0:
            return None
        return tc.l2_normalize(tc.mean(tc.take(f_vis, idx, axis=0), axis=0))

    # ---- text ----------------------------------------------------------------

    def encode_text(self, token_ids, spans: dict | None = None) -> TextEmbedding:
        ids = np.asarray(token_ids, dtype=np.int64)
        spans = dict(spans or {})
        if ids.size == 0:
            return TextEmbedding(None, {})
        x = tc.take(self.text_embed, ids) + Tensor(sincos_1d(np.arange(len(ids)), self.config.embed_dim))
        for blk in self.text_blocks:
            x = blk(x)
        return TextEmbedding(self.text_norm(x), spans)

    @staticmethod
    def pool_text_anchor(text: TextEmbedding, cls: int) -> Tensor | None:
        ranges = text.spans.get(cls)
        if not ranges or text.e_text is None:
            return None
        idx = np.concatenate([np.arange(s, e) for s, e in ranges])
        return tc.l2_normalize(tc.mean(tc.take(text.e_text, idx, axis=0), axis=0))

    def inject_text(self, f_vis: Tensor, e_text: Tensor | None) -> Tensor:
        if e_text is None or e_text.shape[0] == 0:
            return f_vis
        return self.text_inject(f_vis, e_text) + f_vis

    # ---- global aggregation --------------------------------------------------

    def aggregate_global(self, f_local: list) -> GlobalFeature:
        if len(f_local) != self.config.regions:
            raise ContractViolation(f"expected {self.config.regions} regions, got {len(f_local)}")
        parts, lengths = [], []
        for r, f in enumerate(f_local):
            parts.append(f + tc.reshape(tc.take(self.anatomy_embed, [r]), (-1,)))
            lengths.append(f.shape[0])
        s_global = tc.concat(parts, axis=0)
        x = s_global
        for blk in self.gaa_blocks:
            x = blk(x)
        return GlobalFeature(list(f_local), s_global, x, tc.mean(x, axis=0), lengths)

    def classify_region(self, f_local: Tensor) -> Tensor:
        return tc.reshape(self.region_head(tc.reshape(tc.mean(f_local, axis=0), (1, -1))), (-1,))

    # ---- decoders ------------------------------------------------------------

    def decode_mim(self, f_vis: Tensor, visible: np.ndarray, masked: np.ndarray,
                   coords: np.ndarray) -> DecoderState:
        n = len(visible) + len(masked)
        if len(np.intersect1d(visible, masked)) or len(coords) != n:
            raise ContractViolation("visible/masked indices must be disjoint and cover every patch")
        x = self.decoder_embed(f_vis)
        if len(masked):
            x = tc.concat([x, tc.take(self.mask_token, np.zeros(len(masked), dtype=np.int64))], axis=0)
        order = np.concatenate([visible, masked]).astype(np.int64)
        h = tc.take(x, np.argsort(order), axis=0) + Tensor(sincos_3d(coords, self.config.embed_dim))
        for blk in self.decoder_blocks:
            h = blk(h)
        h = self.decoder_norm(h)
        return DecoderState(h, self.head_ct(h), self.head_pet(h))

    def decode_lm(self, memory: Tensor, prefix) -> Tensor:
        """Logits (len(prefix) x vocab) for the next token at every prefix position."""
        ids = np.asarray(prefix, dtype=np.int64)
        if ids.size == 0:
            raise ContractViolation("language decoder needs a non-empty prefix")
        x = tc.take(self.lm_embed, ids) + Tensor(sincos_1d(np.arange(len(ids)), self.config.embed_dim))
        for blk in self.lm_blocks:
            x = blk(x, memory)
        return self.lm_head(self.lm_norm(x))

    def next_token_distribution(self, memory: Tensor, prefix) -> np.ndarray:
        with tc.no_grad():
            return tc.softmax(self.decode_lm(memory, prefix), axis=-1).data

    def generate(self, memory: Tensor, bos: int, eos: int, max_len: int = 160) -> list:
        out = [int(bos)]
        with tc.no_grad():
            while len(out) < max_len:
                nxt = int(np.argmax(self.decode_lm(memory, out).data[-1]))
                out.append(nxt)
                if nxt == eos:
                    break
        return out

    # ---- whole study ---------------------------------------------------------

    def forward_study(self, prep, masks: list | None = None, decode: bool = True,
                      use_text: bool = True) -> StudyOutputs:
        """Run every region of a prepared study.

        ``masks`` holds one (visible, masked) pair per region; ``None`` keeps all
        tokens visible (no reconstruction targets then). ``use_text=False`` hides
        the report from the model, as when generating one.
        """
        cfg = self.config
        tokens = prep.tokens if use_text else np.zeros(0, dtype=np.int64)
        text = self.encode_text(tokens, prep.spans if use_text else {})
        has_text = text.e_text is not None and len(tokens) > 2
        inject = text.e_text if (cfg.inject_text and has_text) else None
        region_outs = []
        for k, region in enumerate(prep.regions):
            if masks is None:
                vis, msk = np.arange(len(region.coords)), np.zeros(0, dtype=np.int64)
            else:
                vis, msk = masks[k]
            batch = self.make_batch(region, vis, msk)
            f_ct, f_pet = self.encode_dual(batch.z_ct, batch.z_pet)
            f_vis = self.fuse_streams(f_ct, f_pet)
            f_local = self.inject_text(f_vis, inject)
            anchors = {}
            for c in np.unique(batch.visible_classes):
                if c != 0:
                    anchors[int(c)] = self.pool_visual_anchor(f_vis, batch.visible_classes, int(c))
            dec = self.decode_mim(f_vis, vis, msk, region.coords) if (decode and len(msk)) else None
            region_outs.append(RegionOutputs(batch, f_ct, f_pet, f_vis, f_local,
                                             self.classify_region(f_local), dec, anchors))
        glob = self.aggregate_global([r.f_local for r in region_outs])
        lm_logits = None
        if decode and use_text and len(prep.tokens) >= 2:
            lm_logits = self.decode_lm(glob.contextual, prep.tokens[:-1])
        visual = merge_regional_anchors([r.visual_anchors for r in region_outs])
        textual = {}
        if has_text:
            for c in sorted(text.spans):
                t = self.pool_text_anchor(text, c)
                if t is not None:
                    textual[c] = t
        return StudyOutputs(region_outs, text, glob, lm_logits, visual, textual)

    def report_memory(self, prep) -> Tensor:
        """GAA output sequence for report generation: all tokens visible, no text."""
        with tc.no_grad():
            return self.forward_study(prep, None, decode=False, use_text=False).global_feature.contextual

    def generate_report(self, prep, bos: int, eos: int, max_len: int = 160) -> list:
        return self.generate(self.report_memory(prep), bos, eos, max_len)

    def fused_tokens(self, prep) -> list:
        """Per region (F_vis, dominant classes) with every token visible, no graph recorded."""
        out = []
        with tc.no_grad():
            for region in prep.regions:
                vis = np.arange(len(region.coords))
                batch = self.make_batch(region, vis, np.zeros(0, dtype=np.int64))
                f_vis = self.fuse_streams(*self.encode_dual(batch.z_ct, batch.z_pet))
                out.append((f_vis.data, region.dominant))
        return out


def merge_regional_anchors(per_region: list) -> dict:
    """One anchor per class: normalised mean of that class's regional anchors."""
    by_class: dict = {}
    for anchors in per_region:
        for c, v in anchors.items():
            by_class.setdefault(c, []).append(v)
    merged = {}
    for c in sorted(by_class):
        vs = by_class[c]
        merged[c] = vs[0] if len(vs) == 1 else tc.l2_normalize(tc.mean(tc.stack_rows(vs), axis=0))
    return merged
