"""Task-token decoder: 10 learnable query tokens refined through N layers.

Each layer first lets all 10 tokens exchange information through
self-attention (task fusion), then routes the two temporal-task tokens
through cross-attention over the per-frame memory and the eight
detection tokens through cross-attention over the keyframe's patch
memory. Residual additions and layer normalization wrap every attention
sublayer. After the last layer, ten independent two-layer MLP heads
translate each token into its prediction.

Token roles are fixed: row 0 predicts whether a state change occurs,
row 1 localizes the change frame, rows 2..9 are detection queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tl
from .attention import (AttentionParams, PositionalEncoding, cross_attention,
                        linear, self_attention)
from .tensor import ContractError, ShapeError, Tensor

TOKEN_COUNT = 10
OSCC_TOKEN = 0
PNR_TOKEN = 1
SCOD_TOKENS = slice(2, 10)
SCOD_QUERY_COUNT = 8


class StateError(Exception):
    """Operation requires state (e.g. a cached pass) that is not present."""


@dataclass
class ClipFeatures:
    """Encoder outputs for one clip.

    ``h_cls`` has one row per frame (per-frame encoders) or a single row
    (clip-level encoder); ``h_total`` keeps every patch of every frame.
    """

    h_cls: Tensor        # [c, D], c in {1, T}
    h_total: Tensor      # [T, P, D]
    frames: int
    patches: int
    clip_duration_seconds: float = 8.0

    def __post_init__(self):
        t, p = self.frames, self.patches
        if t < 2 or p < 1:
            raise ShapeError(f"need T >= 2 and P >= 1, got T={t} P={p}")
        if self.h_total.shape[:2] != (t, p):
            raise ShapeError(f"h_total shape {self.h_total.shape} != "
                             f"({t}, {p}, D)")
        d = self.h_total.shape[2]
        if self.h_cls.shape not in ((1, d), (t, d)):
            raise ShapeError(f"h_cls shape {self.h_cls.shape} must be (1, {d}) "
                             f"or ({t}, {d})")
        if self.clip_duration_seconds <= 0:
            raise ShapeError("clip duration must be positive")

    @property
    def width(self) -> int:
        return self.h_total.shape[2]

    @property
    def per_frame_cls(self) -> bool:
        return self.h_cls.shape[0] == self.frames


@dataclass
class DecoderConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    frames: int = 16
    patches: int = 16
    mlp_hidden: int = 128
    enabled_tasks: tuple[str, ...] = ("oscc", "pnr", "scod")
    # Unit-test switch: skip the self-attention sublayer so the temporal
    # and spatial token streams provably cannot mix.
    self_attention_identity: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ShapeError("need at least one decoder layer")
        if self.width % self.heads != 0:
            raise ShapeError(f"width {self.width} not divisible by "
                             f"{self.heads} heads")
        if not self.enabled_tasks:
            raise ShapeError("at least one task must be enabled")


@dataclass
class TaskTokenBank:
    """The 10 learnable initial token embeddings with their fixed roles."""

    tokens: Tensor  # [10, D]

    def __post_init__(self):
        if self.tokens.shape[0] != TOKEN_COUNT:
            raise ShapeError(f"expected {TOKEN_COUNT} tokens, got "
                             f"{self.tokens.shape[0]}")

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "TaskTokenBank":
        return cls(tokens=tl.randn(rng, (TOKEN_COUNT, width), std=0.02,
                                   requires_grad=True))


@dataclass
class ScodQuery:
    class_logits: Tensor  # [3]: hand, object, no-object
    box: Tensor           # [4]: (cx, cy, w, h), each squashed into (0, 1)


class TaskPredictions:
    """Per-task decoder outputs; absent (disabled) fields raise on access."""

    def __init__(self, oscc_logits: Tensor | None, pnr_logits: Tensor | None,
                 scod: list[ScodQuery] | None, keyframe_used: int):
        self._oscc = oscc_logits
        self._pnr = pnr_logits
        self._scod = scod
        self.keyframe_used = keyframe_used

    def _get(self, value, task):
        if value is None:
            raise ContractError(f"task {task!r} was disabled for this decode")
        return value

    @property
    def oscc_logits(self) -> Tensor:
        return self._get(self._oscc, "oscc")

    @property
    def pnr_logits(self) -> Tensor:
        return self._get(self._pnr, "pnr")

    @property
    def scod(self) -> list[ScodQuery]:
        return self._get(self._scod, "scod")

    def has(self, task: str) -> bool:
        return {"oscc": self._oscc, "pnr": self._pnr,
                "scod": self._scod}[task] is not None


@dataclass
class KeyframeSpec:
    """How the spatial memory's keyframe is chosen for one decode pass."""

    mode: str  # "train" | "infer"
    label_frame: int | None = None
    no_change: bool = False
    pnr_logits: np.ndarray | None = None

    @classmethod
    def train(cls, label_frame: int | None, no_change: bool = False):
        return cls(mode="train", label_frame=label_frame, no_change=no_change)

    @classmethod
    def infer(cls, pnr_logits: np.ndarray):
        return cls(mode="infer", pnr_logits=np.asarray(pnr_logits))


def argmax_first(values: np.ndarray) -> int:
    """Index of the maximum; ties resolve to the lowest index."""
    return int(np.argmax(values))


def build_temporal_memory(features: ClipFeatures,
                          pe: PositionalEncoding) -> Tensor:
    """Per-frame memory h_t: frame features plus the time position table.

    Per-frame encoders contribute their class rows directly; a clip-level
    encoder has no per-frame class axis, so its dense features are
    mean-pooled over patches to recover one row per frame.
    """
    if features.per_frame_cls:
        base = features.h_cls
    else:
        base = tl.mean_axis(features.h_total, axis=1)
    return pe.encode(base, 0)


def select_keyframe(features: ClipFeatures, pe: PositionalEncoding,
                    spec: KeyframeSpec) -> tuple[Tensor, int]:
    """Pick the keyframe and build spatial memory h_s from its patches.

    Training uses the labeled change frame (mid-clip for no-change
    clips, whose detection loss is masked anyway); inference uses the
    first argmax of the keyframe logits.
    """
    t = features.frames
    if spec.mode == "train":
        if spec.label_frame is not None:
            k = int(spec.label_frame)
            if not (0 <= k < t):
                raise ContractError(f"label keyframe {k} outside [0, {t})")
        elif spec.no_change:
            k = t // 2
        else:
            raise ContractError("train-mode keyframe needs a label or an "
                                "explicit no-change marker")
    elif spec.mode == "infer":
        if spec.pnr_logits is None:
            raise ContractError("infer-mode keyframe needs keyframe logits")
        k = argmax_first(spec.pnr_logits)
    else:
        raise ContractError(f"unknown keyframe mode {spec.mode!r}")
    h_s = pe.encode(tl.index0(features.h_total, k), 0)
    return h_s, k


@dataclass
class _Layer:
    self_attn: AttentionParams
    cross_temporal: AttentionParams
    cross_spatial: AttentionParams
    ln_self_g: Tensor
    ln_self_b: Tensor
    ln_t_g: Tensor
    ln_t_b: Tensor
    ln_s_g: Tensor
    ln_s_b: Tensor


@dataclass
class _Head:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def forward(self, token_row: Tensor) -> Tensor:
        h = tl.gelu(linear(token_row, self.w1, self.b1))
        out = linear(h, self.w2, self.b2)
        return tl.reshape(out, (out.shape[1],))


@dataclass
class LayerAttention:
    """Cached attention weights of one layer (per-head numpy matrices)."""

    self_attn: np.ndarray      # [heads, 10, 10]
    temporal: np.ndarray       # [heads, 2, T]
    spatial: np.ndarray        # [heads, 8, P]


class TaskFusionDecoder:
    """The decoder stack plus its ten prediction heads."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        d, h = config.width, config.heads
        self.bank = TaskTokenBank.init(rng, d)
        self.pe = PositionalEncoding(
            max(config.frames, config.patches) + 1, d)
        self.layers = [
            _Layer(
                self_attn=AttentionParams.init(rng, d, h),
                cross_temporal=AttentionParams.init(rng, d, h),
                cross_spatial=AttentionParams.init(rng, d, h),
                ln_self_g=tl.ones(d, requires_grad=True),
                ln_self_b=tl.zeros(d, requires_grad=True),
                ln_t_g=tl.ones(d, requires_grad=True),
                ln_t_b=tl.zeros(d, requires_grad=True),
                ln_s_g=tl.ones(d, requires_grad=True),
                ln_s_b=tl.zeros(d, requires_grad=True),
            )
            for _ in range(config.layers)
        ]
        self.heads = [self._init_head(rng, i) for i in range(TOKEN_COUNT)]
        self._attention_cache: list[LayerAttention] | None = None

    def _head_out_width(self, token: int) -> int:
        if token == OSCC_TOKEN:
            return 2
        if token == PNR_TOKEN:
            return self.config.frames
        return 3 + 4  # class logits + box

    def _init_head(self, rng: np.random.Generator, token: int) -> _Head:
        d, hid = self.config.width, self.config.mlp_hidden
        out = self._head_out_width(token)
        return _Head(
            w1=tl.randn(rng, (d, hid), std=0.02, requires_grad=True),
            b1=tl.zeros(hid, requires_grad=True),
            w2=tl.randn(rng, (hid, out), std=0.02, requires_grad=True),
            b2=tl.zeros(out, requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"tokens": self.bank.tokens}
        for k, layer in enumerate(self.layers):
            params.update(layer.self_attn.named(f"layer{k}.self"))
            params.update(layer.cross_temporal.named(f"layer{k}.cross_t"))
            params.update(layer.cross_spatial.named(f"layer{k}.cross_s"))
            params[f"layer{k}.ln_self.g"] = layer.ln_self_g
            params[f"layer{k}.ln_self.b"] = layer.ln_self_b
            params[f"layer{k}.ln_t.g"] = layer.ln_t_g
            params[f"layer{k}.ln_t.b"] = layer.ln_t_b
            params[f"layer{k}.ln_s.g"] = layer.ln_s_g
            params[f"layer{k}.ln_s.b"] = layer.ln_s_b
        for i, head in enumerate(self.heads):
            params[f"head{i}.w1"] = head.w1
            params[f"head{i}.b1"] = head.b1
            params[f"head{i}.w2"] = head.w2
            params[f"head{i}.b2"] = head.b2
        return params

    def decode(self, features: ClipFeatures, keyframe: KeyframeSpec,
               cache_attention: bool = False) -> TaskPredictions:
        cfg = self.config
        if features.width != cfg.width or features.frames != cfg.frames \
                or features.patches != cfg.patches:
            raise ShapeError("clip features do not match decoder config")

        h_t = build_temporal_memory(features, self.pe)
        h_s, k_used = select_keyframe(features, self.pe, keyframe)

        cache: list[LayerAttention] | None = [] if cache_attention else None
        z = self.bank.tokens
        for layer in self.layers:
            c_self: list[np.ndarray] | None = [] if cache_attention else None
            c_t: list[np.ndarray] | None = [] if cache_attention else None
            c_s: list[np.ndarray] | None = [] if cache_attention else None
            if cfg.self_attention_identity:
                f = z
                if cache_attention:
                    eye = np.broadcast_to(np.eye(TOKEN_COUNT),
                                          (cfg.heads, TOKEN_COUNT, TOKEN_COUNT))
                    c_self.append(eye.copy())
            else:
                f = tl.layer_norm(
                    tl.add(z, self_attention(z, layer.self_attn, c_self)),
                    layer.ln_self_g, layer.ln_self_b)
            f_t = tl.narrow(f, 0, 0, 2)
            f_s = tl.narrow(f, 0, 2, SCOD_QUERY_COUNT)
            z_t = tl.layer_norm(
                tl.add(f_t, cross_attention(h_t, f_t, layer.cross_temporal, c_t)),
                layer.ln_t_g, layer.ln_t_b)
            z_s = tl.layer_norm(
                tl.add(f_s, cross_attention(h_s, f_s, layer.cross_spatial, c_s)),
                layer.ln_s_g, layer.ln_s_b)
            z = tl.concat([z_t, z_s], axis=0)
            if cache_attention:
                cache.append(LayerAttention(self_attn=c_self[0],
                                            temporal=c_t[0], spatial=c_s[0]))
        if cache_attention:
            self._attention_cache = cache

        oscc = pnr = None
        scod = None
        if "oscc" in cfg.enabled_tasks:
            oscc = self.heads[OSCC_TOKEN].forward(tl.narrow(z, 0, OSCC_TOKEN, 1))
        if "pnr" in cfg.enabled_tasks:
            pnr = self.heads[PNR_TOKEN].forward(tl.narrow(z, 0, PNR_TOKEN, 1))
        if "scod" in cfg.enabled_tasks:
            scod = []
            for ti in range(SCOD_TOKENS.start, SCOD_TOKENS.stop):
                raw = self.heads[ti].forward(tl.narrow(z, 0, ti, 1))
                scod.append(ScodQuery(
                    class_logits=tl.narrow(raw, 0, 0, 3),
                    box=tl.sigmoid(tl.narrow(raw, 0, 3, 4)),
                ))
        return TaskPredictions(oscc, pnr, scod, keyframe_used=k_used)

    def infer(self, features: ClipFeatures,
              cache_attention: bool = False) -> TaskPredictions:
        """Two-pass inference: a mid-frame provisional pass produces the
        keyframe logits, whose argmax selects the spatial memory for the
        final pass. Temporal outputs come from the provisional pass (they
        chose the keyframe); detection outputs come from the final pass."""
        if "pnr" not in self.config.enabled_tasks:
            raise ContractError("inference requires the keyframe task")
        first = self.decode(features, KeyframeSpec.train(None, no_change=True))
        k = argmax_first(first.pnr_logits.data)
        second = self.decode(features, KeyframeSpec.infer(first.pnr_logits.data),
                             cache_attention=cache_attention)
        oscc = first._oscc
        scod = second._scod
        return TaskPredictions(oscc, first._pnr, scod, keyframe_used=k)

    def export_attention(self) -> list[LayerAttention]:
        """Attention matrices of the last cached pass, in layer order."""
        if self._attention_cache is None:
            raise StateError("no cached forward pass; run decode with "
                             "cache_attention=True first")
        return self._attention_cache

    def clear_attention_cache(self) -> None:
        self._attention_cache = None
