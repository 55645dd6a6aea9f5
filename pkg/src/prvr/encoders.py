"""Student video and text encoders.

Features are frame-major: a video is a ``(k, input_dim)`` matrix with one
row per frame, a query a ``(n_tokens, text_dim)`` matrix with one row per
token.  Batched variants take a leading batch axis.

Video:  F = OutProj(Transformer(InProj(frames) + PE))
Text:   Q = Transformer(InProj(words));  a = softmax(Q w);  q = a^T Q
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

LN_EPS = 1e-5

_LAYER_KEYS = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
)


@dataclass
class EncoderParams:
    kind: str  # "video" or "text"
    input_dim: int
    hidden: int
    heads: int
    depth: int
    ff_dim: int
    max_frames: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def names(self) -> list[str]:
        """Parameter names in the fixed serialisation order."""
        names = ["in_w", "in_b"]
        if self.kind == "video":
            names.append("pos")
        for layer in range(self.depth):
            names.extend(f"l{layer}.{key}" for key in _LAYER_KEYS)
        names.extend(["out_w", "out_b"] if self.kind == "video" else ["attn_w"])
        return names

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.kind, self.input_dim, self.hidden, self.heads, self.depth,
            self.ff_dim, self.max_frames,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )


@dataclass
class EncodedVideo:
    features: Tensor  # (k, z)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class EncodedQuery:
    sentence_vec: Tensor  # (z,)
    word_feats: Tensor  # (n_s, z)
    attn_weights: Tensor  # (n_s,)


def init_params(seed: int, input_dim: int, z: int, heads: int, max_frames: int,
                kind: str = "video", depth: int = 1, ff_mult: int = 4) -> EncoderParams:
    if kind not in ("video", "text"):
        raise ParameterError(f"encoder kind must be 'video' or 'text', got {kind!r}")
    if heads < 1 or z % heads != 0:
        raise ParameterError(f"hidden size {z} is not divisible by {heads} heads")
    if input_dim < 1 or depth < 1 or max_frames < 1:
        raise ParameterError("input_dim, depth and max_frames must be positive")
    rng = np.random.default_rng(seed)
    ff = ff_mult * z

    def linear(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    raw: dict[str, np.ndarray] = {"in_w": linear(input_dim, z), "in_b": np.zeros(z)}
    if kind == "video":
        raw["pos"] = 0.02 * rng.standard_normal((max_frames, z))
    for layer in range(depth):
        p = f"l{layer}."
        raw[p + "ln1_g"], raw[p + "ln1_b"] = np.ones(z), np.zeros(z)
        for w in ("q", "k", "v", "o"):
            raw[p + f"w{w}"] = linear(z, z)
            raw[p + f"b{w}"] = np.zeros(z)
        raw[p + "ln2_g"], raw[p + "ln2_b"] = np.ones(z), np.zeros(z)
        raw[p + "ff1_w"], raw[p + "ff1_b"] = linear(z, ff), np.zeros(ff)
        raw[p + "ff2_w"], raw[p + "ff2_b"] = linear(ff, z), np.zeros(z)
    if kind == "video":
        raw["out_w"], raw["out_b"] = linear(z, z), np.zeros(z)
    else:
        raw["attn_w"] = rng.standard_normal(z) / np.sqrt(z)
    params = EncoderParams(kind, input_dim, z, heads, depth, ff, max_frames)
    params.tensors = {k: Tensor(raw[k], requires_grad=True, name=k) for k in params.names()}
    return params


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _attention(x: Tensor, params: EncoderParams, prefix: str) -> Tensor:
    B, n, z = x.shape
    H, dh = params.heads, params.head_dim

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, params[prefix + "wq"], params[prefix + "bq"]))
    k = split(_linear(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = split(_linear(x, params[prefix + "wv"], params[prefix + "bv"]))
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, n, z)
    return _linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def transformer_layer(x: Tensor, params: EncoderParams, layer: int = 0) -> Tensor:
    """Pre-norm encoder layer on ``(n, z)`` or ``(B, n, z)`` input."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or x.shape[1] == 0:
        raise DimensionError(f"transformer_layer needs >= 1 position, got shape {x.shape}")
    if x.shape[2] != params.hidden:
        raise DimensionError(f"transformer_layer width {x.shape[2]} != hidden {params.hidden}")
    p = f"l{layer}."
    h = T.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"], LN_EPS)
    x = x + _attention(h, params, p)
    h = T.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"], LN_EPS)
    h = T.gelu(_linear(h, params[p + "ff1_w"], params[p + "ff1_b"]))
    x = x + _linear(h, params[p + "ff2_w"], params[p + "ff2_b"])
    return x.reshape(x.shape[1:]) if squeeze else x


def _check_input(x: Tensor, params: EncoderParams, what: str) -> None:
    if x.shape[-1] != params.input_dim:
        raise DimensionError(
            f"{what} feature dim {x.shape[-1]} does not match encoder input_dim {params.input_dim}")
    if x.shape[-2] == 0:
        raise DimensionError(f"{what} has zero rows")


def encode_videos(frames: Tensor, params: EncoderParams) -> Tensor:
    """``(B, k, input_dim)`` -> ``(B, k, z)``."""
    frames = T.as_tensor(frames)
    if params.kind != "video":
        raise ParameterError("encode_videos needs video encoder parameters")
    _check_input(frames, params, "video")
    k = frames.shape[-2]
    if k > params.max_frames:
        raise DimensionError(f"{k} frames exceed the positional table ({params.max_frames})")
    x = _linear(frames, params["in_w"], params["in_b"]) + params["pos"][:k]
    for layer in range(params.depth):
        x = transformer_layer(x, params, layer)
    return _linear(x, params["out_w"], params["out_b"])


def encode_video(frames: Tensor, params: EncoderParams) -> EncodedVideo:
    frames = T.as_tensor(frames)
    if frames.ndim != 2:
        raise DimensionError(f"encode_video expects (k, dim), got {frames.shape}")
    out = encode_videos(frames.reshape(1, *frames.shape), params)
    return EncodedVideo(out.reshape(out.shape[1:]))


def encode_texts(words: Tensor, params: EncoderParams) -> tuple[Tensor, Tensor, Tensor]:
    """``(B, n_s, text_dim)`` -> sentence vectors ``(B, z)``, word features
    ``(B, n_s, z)`` and attention weights ``(B, n_s)``."""
    words = T.as_tensor(words)
    if params.kind != "text":
        raise ParameterError("encode_texts needs text encoder parameters")
    _check_input(words, params, "query")
    x = _linear(words, params["in_w"], params["in_b"])
    for layer in range(params.depth):
        x = transformer_layer(x, params, layer)
    B, n, z = x.shape
    logits = (x @ params["attn_w"].reshape(z, 1)).reshape(B, n)
    alpha = T.softmax(logits, axis=-1)
    sentence = (alpha.reshape(B, 1, n) @ x).reshape(B, z)
    return sentence, x, alpha


def encode_text(words: Tensor, params: EncoderParams) -> EncodedQuery:
    words = T.as_tensor(words)
    if words.ndim != 2:
        raise DimensionError(f"encode_text expects (n_s, dim), got {words.shape}")
    q, x, alpha = encode_texts(words.reshape(1, *words.shape), params)
    n, z = x.shape[1], x.shape[2]
    return EncodedQuery(q.reshape(z), x.reshape(n, z), alpha.reshape(n))
