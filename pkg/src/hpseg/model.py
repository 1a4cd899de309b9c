"""The hierarchical segmentation architecture.

backbone -> pixel decoder -> one or two transformer decoders -> plant and
leaf segmentation modules. Decoder layers cycle through the feature pyramid
coarse to fine with masked cross-attention seeded by the previous layer's
predicted masks; every layer's predictions are kept for deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .config import LEVEL_STRIDES, ModelConfig, RunConfig, parse_config_text
from .errors import ConfigError, ShapeError
from .layers import Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, sine_position_encoding
from .tensor import (
    ParamStore,
    Tensor,
    add,
    bilinear_resize,
    matmul,
    no_grad,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

PLANT = "plant"
LEAF = "leaf"


@dataclass
class SegmentPrediction:
    """One decoder tap: per-query class distribution and mask logits."""

    class_logits: Tensor          # (N, K+1), last index = no-object
    class_probs: Tensor           # softmax of the above
    mask_logits: Tensor           # (N, h, w) at the mask stride
    mask_embeddings: Tensor       # (C, N)
    layer_index: int              # -1 for the pre-decoder seed prediction
    stream: str                   # "plant" | "leaf"

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]

    @property
    def num_classes(self) -> int:
        """Real classes, excluding no-object."""
        return self.class_logits.shape[1] - 1


@dataclass
class PixelDecoderOutput:
    pyramid: list[tuple[Tensor, tuple[int, int]]]   # coarse to fine, each (C,h,w)
    pixel_embedding: Tensor                         # (C, H/mask_stride, W/mask_stride)


@dataclass
class ModelOutputs:
    plant: list[SegmentPrediction]
    leaf: list[SegmentPrediction]
    pixel_embedding: Tensor
    image_hw: tuple[int, int]
    attn_masks: dict[str, list[np.ndarray]] = field(default_factory=dict)


class Backbone:
    """Five conv stages (stem + 4), emitting features at strides 4/8/16/32.

    Stage index < freeze_stages leaves that stage's parameters out of the
    learnable set, mirroring the frozen-pretrained-stages training policy.
    """

    def __init__(self, store: ParamStore, widths, rng, dtype, freeze_stages: int = 0):
        w1, w2, w3, w4 = widths
        self.stages: list[list[Conv2d]] = []
        defs = [
            ("backbone.stem", [(3, w1, 2)]),
            ("backbone.stage1", [(w1, w1, 2), (w1, w1, 1)]),
            ("backbone.stage2", [(w1, w2, 2), (w2, w2, 1)]),
            ("backbone.stage3", [(w2, w3, 2), (w3, w3, 1)]),
            ("backbone.stage4", [(w3, w4, 2), (w4, w4, 1)]),
        ]
        for idx, (prefix, convs) in enumerate(defs):
            learnable = idx >= freeze_stages
            stage = [
                Conv2d(store, f"{prefix}.conv{i}", c_in, c_out, 3, stride, 1,
                       rng, dtype, group="backbone", learnable=learnable)
                for i, (c_in, c_out, stride) in enumerate(convs)
            ]
            self.stages.append(stage)

    def __call__(self, image: Tensor) -> dict[int, Tensor]:
        from .tensor import gelu

        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"backbone expects (3, H, W), got {image.shape}")
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} not divisible by 32")
        x = image
        features: dict[int, Tensor] = {}
        stride = 1
        for stage, convs in enumerate(self.stages):
            for conv in convs:
                x = gelu(conv(x))
                stride *= conv.stride
            if stage >= 1:
                features[stride] = x
        return features


class PixelDecoder:
    """Lateral 1x1 projections + top-down bilinear fusion.

    Produces the 3-level pyramid (strides 32/16/8, positional encodings
    added) and the per-pixel embedding at the configured mask stride.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig, rng, dtype):
        c = cfg.embed_dim
        widths = dict(zip((4, 8, 16, 32), cfg.backbone_widths))
        self.mask_stride = cfg.mask_stride
        self.embed_dim = c
        self.dtype = dtype
        lateral_strides = [32, 16, 8] + ([4] if cfg.mask_stride <= 4 else [])
        self.laterals = {
            s: Conv2d(store, f"pixel_decoder.lateral{s}", widths[s], c, 1, 1, 0, rng, dtype)
            for s in lateral_strides
        }
        fuse_strides = [16, 8] + ([4] if cfg.mask_stride <= 4 else [])
        self.fuses = {
            s: Conv2d(store, f"pixel_decoder.fuse{s}", c, c, 3, 1, 1, rng, dtype)
            for s in fuse_strides
        }
        self.mask_convs = []
        s = 4
        while s > cfg.mask_stride:
            s //= 2
            self.mask_convs.append(
                Conv2d(store, f"pixel_decoder.mask{s}", c, c, 3, 1, 1, rng, dtype))

    def __call__(self, features: dict[int, Tensor]) -> PixelDecoderOutput:
        fused: dict[int, Tensor] = {32: self.laterals[32](features[32])}
        for s in (16, 8) + ((4,) if 4 in self.laterals else ()):
            up = bilinear_resize(fused[s * 2], features[s].shape[1:])
            fused[s] = self.fuses[s](add(self.laterals[s](features[s]), up))
        pyramid = []
        for s in LEVEL_STRIDES:
            f = fused[s]
            pe = sine_position_encoding(self.embed_dim, f.shape[1], f.shape[2], self.dtype)
            pyramid.append((add(f, pe), (f.shape[1], f.shape[2])))
        eps = fused[4] if self.mask_stride <= 4 else fused[8]
        for conv in self.mask_convs:
            eps = conv(bilinear_resize(eps, (eps.shape[1] * 2, eps.shape[2] * 2)))
        return PixelDecoderOutput(pyramid=pyramid, pixel_embedding=eps)


class DecoderLayer:
    """Masked cross-attention, self-attention, FFN; pre-norm residual blocks."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig, rng, dtype):
        c, h = cfg.embed_dim, cfg.heads
        self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross_attn", c, h, rng, dtype)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self_attn", c, h, rng, dtype)
        self.ffn = Mlp(store, f"{prefix}.ffn", [c, cfg.ffn_dim, c], rng, dtype)
        self.norm_cross = LayerNorm(store, f"{prefix}.norm_cross", c, dtype)
        self.norm_self = LayerNorm(store, f"{prefix}.norm_self", c, dtype)
        self.norm_ffn = LayerNorm(store, f"{prefix}.norm_ffn", c, dtype)

    def __call__(self, q: Tensor, qpos: Tensor, kv: Tensor, attn_mask) -> Tensor:
        t = add(self.norm_cross(q), qpos)
        q = add(q, self.cross_attn(t, kv, kv, attn_mask))
        t = add(self.norm_self(q), qpos)
        q = add(q, self.self_attn(t, t, t))
        q = add(q, self.ffn(self.norm_ffn(q)))
        return q


class SegmentationModule:
    """Per-query class distribution plus dot-product mask logits."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig,
                 num_classes: int, stream: str, rng, dtype):
        c = cfg.embed_dim
        self.stream = stream
        self.class_proj = Linear(store, f"{prefix}.class_proj", c, num_classes + 1, rng, dtype)
        self.mask_mlp = Mlp(store, f"{prefix}.mask_mlp", [c, c, c, c], rng, dtype)

    def __call__(self, q: Tensor, pixel_embedding: Tensor, layer_index: int) -> SegmentPrediction:
        logits = self.class_proj(q)
        probs = softmax(logits, axis=-1)
        emask = self.mask_mlp(q)                                    # (N, C)
        c, h, w = pixel_embedding.shape
        flat = reshape(pixel_embedding, (c, h * w))
        mask_logits = reshape(matmul(emask, flat), (emask.shape[0], h, w))
        return SegmentPrediction(
            class_logits=logits,
            class_probs=probs,
            mask_logits=mask_logits,
            mask_embeddings=transpose(emask, (1, 0)),
            layer_index=layer_index,
            stream=self.stream,
        )


class TransformerDecoder:
    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig, rng, dtype):
        n, c = cfg.num_queries, cfg.embed_dim
        self.query_feat = store.add(f"{prefix}.query_feat", np.zeros((n, c), dtype=dtype))
        self.query_pos = store.add(
            f"{prefix}.query_pos", (rng.normal(0.0, 0.02, size=(n, c))).astype(dtype))
        self.layers = [
            DecoderLayer(store, f"{prefix}.layer{i}", cfg, rng, dtype)
            for i in range(cfg.decoder_layers)
        ]


def attention_mask_from(mask_logits: np.ndarray, target_hw: tuple[int, int],
                        full_attention_fallback: bool = True) -> np.ndarray:
    """Boolean (N, h*w) mask: attendable where resized sigmoid > 0.5.

    Rows with nothing attendable are opened up to full attention.
    """
    logits = np.asarray(mask_logits)
    with no_grad():
        resized = bilinear_resize(Tensor(logits), target_hw).data
    mask = (resized > 0.0).reshape(logits.shape[0], -1)
    if full_attention_fallback:
        empty = ~mask.any(axis=1)
        if empty.any():
            mask[empty] = True
    return mask


class HierarchicalModel:
    """Full architecture with addressable parameters and staged forward."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 freeze_stages: int = 0):
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype).type
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.store, cfg.backbone_widths, rng, self.dtype,
                                 freeze_stages=freeze_stages)
        self.pixel_decoder = PixelDecoder(self.store, cfg, rng, self.dtype)
        if cfg.transformers == 1:
            self.decoders = {"decoder": TransformerDecoder(self.store, "decoder", cfg, rng, self.dtype)}
            self._decoder_streams = {"decoder": (PLANT, LEAF)}
        else:
            self.decoders = {
                "plant_decoder": TransformerDecoder(self.store, "plant_decoder", cfg, rng, self.dtype),
                "leaf_decoder": TransformerDecoder(self.store, "leaf_decoder", cfg, rng, self.dtype),
            }
            self._decoder_streams = {"plant_decoder": (PLANT,), "leaf_decoder": (LEAF,)}
        self.heads = {
            PLANT: SegmentationModule(self.store, "plant_head", cfg, cfg.k_plant, PLANT, rng, self.dtype),
            LEAF: SegmentationModule(self.store, "leaf_head", cfg, cfg.k_leaf, LEAF, rng, self.dtype),
        }

    # -- staged forward (also used by the latency harness) -------------------

    def backbone_apply(self, image: Tensor) -> dict[int, Tensor]:
        return self.backbone(image)

    def head_apply(self, features: dict[int, Tensor],
                   fixed_attn_masks: dict[str, list[np.ndarray]] | None = None) -> ModelOutputs:
        pix = self.pixel_decoder(features)
        levels = []
        for feat, (h, w) in pix.pyramid:
            c = feat.shape[0]
            levels.append((transpose(reshape(feat, (c, h * w)), (1, 0)), (h, w)))
        outputs = ModelOutputs(plant=[], leaf=[], pixel_embedding=pix.pixel_embedding,
                               image_hw=(features[4].shape[1] * 4, features[4].shape[2] * 4))
        by_stream = {PLANT: outputs.plant, LEAF: outputs.leaf}
        for name, decoder in self.decoders.items():
            streams = self._decoder_streams[name]
            q = decoder.query_feat.tensor
            qpos = decoder.query_pos.tensor
            prev_logits = {
                s: self.heads[s](q, pix.pixel_embedding, layer_index=-1).mask_logits.data
                for s in streams
            }
            outputs.attn_masks[name] = []
            for t, layer in enumerate(decoder.layers):
                feats_l, size_l = levels[t % len(levels)]
                if fixed_attn_masks is not None:
                    mask = fixed_attn_masks[name][t]
                else:
                    parts = [attention_mask_from(prev_logits[s], size_l,
                                                 full_attention_fallback=False)
                             for s in streams]
                    mask = parts[0]
                    for extra in parts[1:]:
                        mask = mask | extra
                    empty = ~mask.any(axis=1)
                    if empty.any():
                        mask[empty] = True
                outputs.attn_masks[name].append(mask)
                q = layer(q, qpos, feats_l, mask)
                for s in streams:
                    pred = self.heads[s](q, pix.pixel_embedding, layer_index=t)
                    by_stream[s].append(pred)
                    prev_logits[s] = pred.mask_logits.data
        return outputs

    def forward(self, image: Tensor,
                fixed_attn_masks: dict[str, list[np.ndarray]] | None = None) -> ModelOutputs:
        return self.head_apply(self.backbone_apply(image), fixed_attn_masks)

    # -- parameter access ------------------------------------------------------

    def parameters(self):
        return list(self.store)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def num_parameters(self) -> int:
        return self.store.count()

    def save(self, path, config_echo: str) -> None:
        checkpoint.save(path, config_echo, self.parameters())


def image_to_tensor(image_u8: np.ndarray, dtype=np.float32) -> Tensor:
    """HWC uint8 RGB -> (3, H, W) float in [-0.5, 0.5]."""
    arr = np.ascontiguousarray(image_u8.transpose(2, 0, 1)).astype(dtype) / 255.0 - 0.5
    return Tensor(arr.astype(dtype))


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per component for a config."""
    cfg.validate()
    c = cfg.embed_dim
    w1, w2, w3, w4 = cfg.backbone_widths

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    backbone = conv(3, w1, 3)
    for a, b in ((w1, w1), (w1, w2), (w2, w3), (w3, w4)):
        backbone += conv(a, b, 3) + conv(b, b, 3)

    widths = dict(zip((4, 8, 16, 32), cfg.backbone_widths))
    lateral_strides = [32, 16, 8] + ([4] if cfg.mask_stride <= 4 else [])
    pixel = sum(conv(widths[s], c, 1) for s in lateral_strides)
    n_fuse = 2 + (1 if cfg.mask_stride <= 4 else 0)
    pixel += n_fuse * conv(c, c, 3)
    s = 4
    while s > cfg.mask_stride:
        s //= 2
        pixel += conv(c, c, 3)

    linear = lambda i, o: i * o + o
    per_layer = 2 * 4 * linear(c, c)                       # self + cross attention
    per_layer += linear(c, cfg.ffn_dim) + linear(cfg.ffn_dim, c)
    per_layer += 3 * 2 * c                                 # three layer norms

    def module(k):
        return linear(c, k + 1) + 3 * linear(c, c)

    plant_module = module(cfg.k_plant)
    leaf_module = module(cfg.k_leaf)
    queries = cfg.transformers * 2 * cfg.num_queries * c
    layers_total = cfg.transformers * cfg.decoder_layers * per_layer
    total = backbone + pixel + layers_total + plant_module + leaf_module + queries
    return {
        "backbone": backbone,
        "pixel_decoder": pixel,
        "per_decoder_layer": per_layer,
        "decoder_layers_total": layers_total,
        "plant_module": plant_module,
        "leaf_module": leaf_module,
        "query_embeddings": queries,
        "total": total,
    }


def load_model(path, dtype=np.float32, freeze_stages: int = 0):
    """Build a model from a checkpoint's embedded config and load its weights.

    Returns (model, run_config). The stored name set and shapes must match
    the freshly built model exactly.
    """
    echo, weights = checkpoint.read(path)
    run_cfg = parse_config_text(echo)
    model = HierarchicalModel(run_cfg.model, seed=0, dtype=dtype, freeze_stages=freeze_stages)
    names = set(model.store.names())
    stored = set(weights.keys())
    if names != stored:
        missing = sorted(names - stored)[:3]
        extra = sorted(stored - names)[:3]
        raise checkpoint.CheckpointError(
            f"checkpoint parameter names do not match config: missing={missing} extra={extra}")
    for p in model.parameters():
        w = weights[p.name]
        if tuple(w.shape) != tuple(p.data.shape):
            raise checkpoint.CheckpointError(
                f"shape mismatch for '{p.name}': file {w.shape} vs model {p.data.shape}")
        p.data = w.astype(model.dtype)
    return model, run_cfg


def build_model(run_cfg: RunConfig, seed: int, dtype=np.float32,
                freeze_stages: int | None = None) -> HierarchicalModel:
    fs = run_cfg.train.freeze_stages if freeze_stages is None else freeze_stages
    return HierarchicalModel(run_cfg.model, seed=seed, dtype=dtype, freeze_stages=fs)
