"""Model components: frozen decoder-only backbone, speech projector,
low-rank adapters, frame averaging, prompt splicing.

Weights are stored (d_out, d_in); forward passes compute x @ W^T. Low-rank
pairs follow delta_W = (alpha/r) * B @ A with B zero-initialized, so a fresh
adapter is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, LengthError, ShapeError
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    masked_cross_entropy,  # noqa: F401  (loss op re-exported alongside the model)
    matmul,
    parameter,
    scale,
    softmax,
    tslice,
)

LORA_SITES = ("attn_q", "attn_k", "attn_v", "attn_out", "ffn_up", "ffn_down")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 96
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ffn", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class ProjectorConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_in: int = 32
    d_ffn: int = 64
    d_out: int = 64
    dropout: float = 0.1
    frame_avg_k: int = 3
    norm_style: str = "pre-ln"
    max_frames: int = 64  # learned positional table size

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.frame_avg_k < 1:
            raise ConfigError("frame_avg_k must be >= 1")
        if self.norm_style != "pre-ln":
            raise ConfigError("only pre-layer-norm projectors are supported")
        if self.d_in % self.n_heads:
            raise ConfigError("d_in must be divisible by n_heads")
        if self.max_frames < 1:
            raise ConfigError("max_frames must be positive")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("attn_q", "attn_k", "attn_out", "ffn_up", "ffn_down")
    dropout: float = 0.0
    include_v: bool = False  # "Q/K values" read literally: V excluded by default

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        unknown = set(self.targets) - set(LORA_SITES)
        if unknown:
            raise ConfigError(f"unknown adapter sites {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def effective_targets(self) -> tuple[str, ...]:
        t = tuple(self.targets)
        if self.include_v and "attn_v" not in t:
            t = t + ("attn_v",)
        return t


@dataclass
class LoraPair:
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r), zero at init


def _site_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, int]]:
    d, f = cfg.d_model, cfg.d_ffn
    return {
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_out": (d, d),
        "ffn_up": (f, d),
        "ffn_down": (d, f),
    }


class LoraAdapters:
    """One low-rank pair per (layer, site) across all backbone layers."""

    def __init__(self, backbone_cfg: BackboneConfig, cfg: LoraConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.pairs: dict[tuple[int, str], LoraPair] = {}
        shapes = _site_shapes(backbone_cfg)
        for layer in range(backbone_cfg.n_layers):
            for site in cfg.effective_targets:
                d_out, d_in = shapes[site]
                a = rng.split(f"{layer}", site).normal(size=(cfg.rank, d_in), scale=1.0 / np.sqrt(d_in))
                self.pairs[(layer, site)] = LoraPair(
                    A=parameter(a.astype(dtype)),
                    B=parameter(np.zeros((d_out, cfg.rank), dtype=dtype)),
                )

    def param_dict(self) -> dict[str, Tensor]:
        out = {}
        for (layer, site), pair in sorted(self.pairs.items()):
            out[f"layers.{layer}.{site}.A"] = pair.A
            out[f"layers.{layer}.{site}.B"] = pair.B
        return out

    def set_trainable(self, flag: bool) -> None:
        for pair in self.pairs.values():
            pair.A.requires_grad = flag
            pair.B.requires_grad = flag

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        if set(params) != set(arrays):
            raise ShapeError("adapter checkpoint names do not match this configuration")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {arrays[name].shape}")
            t.data = arrays[name].astype(t.data.dtype)


def lora_forward(W: np.ndarray | Tensor, pair: LoraPair, cfg: LoraConfig, x) -> Tensor:
    """y = W x + (alpha/r) B (A x) for a single vector x."""
    W = W if isinstance(W, Tensor) else Tensor(W)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if W.shape[-1] != x.shape[-1] or pair.A.shape[-1] != x.shape[-1] or pair.B.shape[0] != W.shape[0]:
        raise ShapeError(f"lora_forward: W {W.shape}, A {pair.A.shape}, B {pair.B.shape}, x {x.shape}")
    base = matmul(W, x)
    delta = matmul(pair.B, matmul(pair.A, x))
    return add(base, scale(delta, cfg.scaling))


def _linear(x: Tensor, W: Tensor, lora: "LoraAdapters | None", key: tuple[int, str]) -> Tensor:
    y = matmul(x, W, transpose_b=True)
    if lora is not None and key in lora.pairs:
        pair = lora.pairs[key]
        delta = matmul(matmul(x, pair.A, transpose_b=True), pair.B, transpose_b=True)
        y = add(y, scale(delta, lora.cfg.scaling))
    return y


def _last_axis_slice(t: Tensor, lo: int, hi: int) -> Tensor:
    key = (slice(None),) * (t.ndim - 1) + (slice(lo, hi),)
    return tslice(t, key)


def _multi_head_attention(q, k, v, n_heads, head_dim, attn_mask, drop_p=0.0, rng=None, train=False):
    heads = []
    inv = 1.0 / float(np.sqrt(head_dim))
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh, kh, vh = (_last_axis_slice(t, lo, hi) for t in (q, k, v))
        scores = scale(matmul(qh, kh, transpose_b=True), inv)
        if attn_mask is not None:
            scores = add(scores, attn_mask)
        probs = softmax(scores)
        if drop_p > 0 and train:
            probs = dropout(probs, drop_p, rng.split(f"attn{h}"), train)
        heads.append(matmul(probs, vh))
    return concat(heads, axis=-1)


class Backbone:
    """Decoder-only pre-LN transformer with learned absolute positions."""

    def __init__(self, cfg: BackboneConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d, f = cfg.d_model, cfg.d_ffn

        def init(name, shape, std=0.02):
            return parameter((rng.split(name).normal(size=shape) * std).astype(dtype))

        self.params: dict[str, Tensor] = {
            "wte": init("wte", (cfg.vocab_size, d)),
            "wpe": init("wpe", (cfg.max_seq_len, d)),
        }
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            self.params[p + "ln1.g"] = parameter(np.ones(d, dtype=dtype))
            self.params[p + "ln1.b"] = parameter(np.zeros(d, dtype=dtype))
            self.params[p + "wq"] = init(p + "wq", (d, d))
            self.params[p + "wk"] = init(p + "wk", (d, d))
            self.params[p + "wv"] = init(p + "wv", (d, d))
            self.params[p + "wo"] = init(p + "wo", (d, d))
            self.params[p + "ln2.g"] = parameter(np.ones(d, dtype=dtype))
            self.params[p + "ln2.b"] = parameter(np.zeros(d, dtype=dtype))
            self.params[p + "ffn_up"] = init(p + "ffn_up", (f, d))
            self.params[p + "ffn_down"] = init(p + "ffn_down", (d, f))
        self.params["ln_f.g"] = parameter(np.ones(d, dtype=dtype))
        self.params["ln_f.b"] = parameter(np.zeros(d, dtype=dtype))
        self.params["lm_head"] = init("lm_head", (cfg.vocab_size, d))
        self._masks: dict[int, Tensor] = {}

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ShapeError("backbone checkpoint names do not match this configuration")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {arrays[name].shape}")
            t.data = arrays[name].astype(self.dtype)

    def embed(self, token_ids) -> Tensor:
        return embedding_lookup(self.params["wte"], np.asarray(token_ids, dtype=np.int64))

    def _causal_mask(self, L: int) -> Tensor:
        m = self._masks.get(L)
        if m is None:
            mask = np.triu(np.full((L, L), -1e9, dtype=np.float32), k=1)
            m = self._masks[L] = Tensor(mask)
        return m

    def forward(self, emb: Tensor, positions, lora: LoraAdapters | None = None) -> Tensor:
        """emb: (..., L, d_model) content embeddings; returns (..., L, vocab) logits."""
        if emb.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"expected embeddings of width {self.cfg.d_model}, got {emb.shape}")
        L = emb.shape[-2]
        if L > self.cfg.max_seq_len:
            raise LengthError(f"sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        p = self.params
        x = add(emb, embedding_lookup(p["wpe"], np.asarray(positions, dtype=np.int64)))
        mask = self._causal_mask(L)
        head_dim = self.cfg.d_model // self.cfg.n_heads
        for i in range(self.cfg.n_layers):
            pre = f"layers.{i}."
            h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = _linear(h, p[pre + "wq"], lora, (i, "attn_q"))
            k = _linear(h, p[pre + "wk"], lora, (i, "attn_k"))
            v = _linear(h, p[pre + "wv"], lora, (i, "attn_v"))
            ctx = _multi_head_attention(q, k, v, self.cfg.n_heads, head_dim, mask)
            x = add(x, _linear(ctx, p[pre + "wo"], lora, (i, "attn_out")))
            h = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = gelu(_linear(h, p[pre + "ffn_up"], lora, (i, "ffn_up")))
            x = add(x, _linear(u, p[pre + "ffn_down"], lora, (i, "ffn_down")))
        x = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return matmul(x, p["lm_head"], transpose_b=True)


class SpeechProjector:
    """Pre-LN bidirectional transformer encoder mapping averaged speech
    frames into the backbone's embedding space.

    A learned positional table is added to the input frames; without it the
    encoder is near permutation-equivariant and cannot shape its outputs by
    sequence position, which the downstream content-reading circuits need.
    """

    def __init__(self, cfg: ProjectorConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d, f = cfg.d_in, cfg.d_ffn

        def init(name, shape, std=0.02):
            return parameter((rng.split(name).normal(size=shape) * std).astype(dtype))

        self.params: dict[str, Tensor] = {"wpe": init("wpe", (cfg.max_frames, d))}
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            self.params[p + "ln1.g"] = parameter(np.ones(d, dtype=dtype))
            self.params[p + "ln1.b"] = parameter(np.zeros(d, dtype=dtype))
            self.params[p + "wq"] = init(p + "wq", (d, d))
            self.params[p + "wk"] = init(p + "wk", (d, d))
            self.params[p + "wv"] = init(p + "wv", (d, d))
            self.params[p + "wo"] = init(p + "wo", (d, d))
            self.params[p + "ln2.g"] = parameter(np.ones(d, dtype=dtype))
            self.params[p + "ln2.b"] = parameter(np.zeros(d, dtype=dtype))
            self.params[p + "ffn_up"] = init(p + "ffn_up", (f, d))
            self.params[p + "ffn_down"] = init(p + "ffn_down", (d, f))
        self.params["ln_f.g"] = parameter(np.ones(d, dtype=dtype))
        self.params["ln_f.b"] = parameter(np.zeros(d, dtype=dtype))
        self.params["out_proj"] = init("out_proj", (cfg.d_out, d))

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ShapeError("projector checkpoint names do not match this configuration")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {arrays[name].shape}")
            t.data = arrays[name].astype(self.dtype)

    def forward(self, frames: Tensor, train: bool = False, rng: Rng | None = None, pad_mask=None) -> Tensor:
        """frames: (..., M, d_in) averaged frames; returns (..., M, d_out).

        pad_mask: optional additive attention mask (..., 1, M) with large
        negative values at padded key positions.
        """
        if frames.shape[-1] != self.cfg.d_in:
            raise ShapeError(f"expected frames of width {self.cfg.d_in}, got {frames.shape}")
        if frames.shape[-2] > self.cfg.max_frames:
            raise LengthError(f"{frames.shape[-2]} frames exceed max_frames {self.cfg.max_frames}")
        if train and self.cfg.dropout > 0 and rng is None:
            raise ContractViolation("training-mode projector needs an rng for dropout")
        p = self.params
        drop = self.cfg.dropout
        mask = Tensor(pad_mask) if pad_mask is not None else None
        head_dim = self.cfg.d_in // self.cfg.n_heads
        x = add(frames, embedding_lookup(p["wpe"], np.arange(frames.shape[-2], dtype=np.int64)))
        for i in range(self.cfg.n_layers):
            pre = f"layers.{i}."
            r = rng.split(f"layer{i}") if (train and drop > 0) else None
            h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = matmul(h, p[pre + "wq"], transpose_b=True)
            k = matmul(h, p[pre + "wk"], transpose_b=True)
            v = matmul(h, p[pre + "wv"], transpose_b=True)
            ctx = _multi_head_attention(q, k, v, self.cfg.n_heads, head_dim, mask, drop, r, train)
            attn_out = matmul(ctx, p[pre + "wo"], transpose_b=True)
            if train and drop > 0:
                attn_out = dropout(attn_out, drop, r.split("post-attn"), train)
            x = add(x, attn_out)
            h = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = matmul(gelu(matmul(h, p[pre + "ffn_up"], transpose_b=True)), p[pre + "ffn_down"], transpose_b=True)
            if train and drop > 0:
                u = dropout(u, drop, r.split("post-ffn"), train)
            x = add(x, u)
        x = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return matmul(x, p["out_proj"], transpose_b=True)


def project_speech(frames: np.ndarray, projector: SpeechProjector, train_mode: bool, rng: Rng | None = None) -> Tensor:
    """Project one example's averaged frames (M, d_in) to (M, d_out)."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != projector.cfg.d_in:
        raise ShapeError(f"expected (M, {projector.cfg.d_in}) frames, got {frames.shape}")
    return projector.forward(Tensor(frames.astype(projector.dtype)), train=train_mode, rng=rng)


def average_frames(frames: np.ndarray, k: int) -> np.ndarray:
    """Mean-pool every k consecutive rows; the final partial group is averaged
    over its actual size. Output has ceil(T/k) rows."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ContractViolation(f"expected a non-empty (T, d) frame matrix, got {frames.shape}")
    if k < 1:
        raise ContractViolation("k must be >= 1")
    if k == 1:
        return frames
    T = frames.shape[0]
    n_groups = int(np.ceil(T / k))
    out = np.empty((n_groups, frames.shape[1]), dtype=frames.dtype)
    for g in range(n_groups):
        out[g] = frames[g * k : min((g + 1) * k, T)].mean(axis=0)
    return out


@dataclass
class SplicedPrompt:
    """One model-ready sequence: embeddings with speech rows spliced in."""

    embeddings: Tensor  # (L, d_model)
    loss_mask: np.ndarray  # (L,) bool, True exactly at target positions
    positions: np.ndarray  # (L,) int
    token_ids: np.ndarray  # (L,) int, -1 at speech rows


def splice_prompt(
    wte: Tensor,
    prefix_tokens,
    speech_embeddings: Tensor | None,
    suffix_tokens,
    target_tokens,
    max_seq_len: int,
) -> SplicedPrompt:
    """embed(prefix) + speech + embed(suffix) + embed(targets), with the loss
    mask covering exactly the target positions."""
    prefix = list(prefix_tokens)
    suffix = list(suffix_tokens)
    targets = list(target_tokens)
    m = 0 if speech_embeddings is None else speech_embeddings.shape[0]
    total = len(prefix) + m + len(suffix) + len(targets)
    if total > max_seq_len:
        raise LengthError(f"spliced length {total} exceeds max_seq_len {max_seq_len}")
    pieces = []
    if prefix:
        pieces.append(embedding_lookup(wte, np.asarray(prefix, dtype=np.int64)))
    if m:
        pieces.append(speech_embeddings)
    tail = suffix + targets
    if tail:
        pieces.append(embedding_lookup(wte, np.asarray(tail, dtype=np.int64)))
    emb = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
    mask = np.zeros(total, dtype=bool)
    mask[total - len(targets) :] = True
    token_ids = np.asarray(prefix + [-1] * m + tail, dtype=np.int64)
    return SplicedPrompt(
        embeddings=emb,
        loss_mask=mask,
        positions=np.arange(total, dtype=np.int64),
        token_ids=token_ids,
    )
