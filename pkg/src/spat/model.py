"""Encoder-only transformer forecaster with removable, maskable attention.

Two tokenizations are supported:

* ``temporal_tokens``: each token is one patch of a single channel's series;
  channels are folded into the batch dimension and share all weights.
* ``variate_tokens``: each token is one channel's entire lookback window.

Every attention block carries a binary connection mask over its score
matrix. The realized scores are ``A * mask``, so the mask gradient is the
per-position sensitivity of the loss to removing that attention score. A
block whose ``pruned`` flag is set computes the identity on its attention
sublayer (residual path only); the FFN sublayer is always retained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import (
    Tensor,
    dropout,
    gelu,
    layer_norm,
    pad_repeat_last,
    relu,
    row_softmax,
    unfold_last,
)

MODES = ("temporal_tokens", "variate_tokens")
ACTIVATIONS = ("gelu", "relu")
NORM_PLACEMENTS = ("pre", "post")

INSTANCE_NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    mode: str = "temporal_tokens"
    lookback: int = 96
    horizon: int = 24
    channels: int = 7
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    layers: int = 3
    patch_len: int = 16
    patch_stride: int = 8
    end_padding: bool = True
    dropout: float = 0.2
    activation: str = "gelu"
    norm_placement: str = "pre"
    instance_norm: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigError(
                f"norm_placement must be one of {NORM_PLACEMENTS}, "
                f"got {self.norm_placement!r}")
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("layers and heads must both be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.lookback < 1 or self.horizon < 1 or self.channels < 1:
            raise ConfigError("lookback, horizon and channels must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mode == "temporal_tokens":
            if self.patch_len < 1 or self.patch_stride < 1:
                raise ConfigError("patch_len and patch_stride must be >= 1")
            if self.lookback < self.patch_len:
                raise ConfigError(
                    f"lookback {self.lookback} shorter than patch_len {self.patch_len}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def token_count(self) -> int:
        if self.mode == "variate_tokens":
            return self.channels
        n = (self.lookback - self.patch_len) // self.patch_stride + 1
        return n + 1 if self.end_padding else n


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class AttentionBlock:
    """One encoder block: maskable multi-head attention plus FFN sublayer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, f = cfg.d_model, cfg.d_ff
        s = cfg.token_count
        self.cfg = cfg
        self.pruned = False
        self.w_q = _param(_xavier(rng, d, d))
        self.b_q = _param(np.zeros(d))
        self.w_k = _param(_xavier(rng, d, d))
        self.b_k = _param(np.zeros(d))
        self.w_v = _param(_xavier(rng, d, d))
        self.b_v = _param(np.zeros(d))
        self.w_e = _param(_xavier(rng, d, d))
        self.b_e = _param(np.zeros(d))
        self.ln1_g = _param(np.ones(d))
        self.ln1_b = _param(np.zeros(d))
        self.w1 = _param(_xavier(rng, d, f))
        self.b1 = _param(np.zeros(f))
        self.w2 = _param(_xavier(rng, f, d))
        self.b2 = _param(np.zeros(d))
        self.ln2_g = _param(np.ones(d))
        self.ln2_b = _param(np.zeros(d))
        # connection mask over attention scores, all scores retained by default
        self.mask = Tensor(np.ones((cfg.heads, s, s)))
        # most recent attention tensors, kept when collect_attention is set
        self.last_attention: Tensor | None = None
        self.last_masked_attention: Tensor | None = None

    ATTENTION_PARAMS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_e", "b_e")
    OTHER_PARAMS = ("ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")

    def named_parameters(self):
        names = (() if self.pruned else self.ATTENTION_PARAMS) + self.OTHER_PARAMS
        return [(n, getattr(self, n)) for n in names]

    def remove_attention(self) -> None:
        """Make the attention sublayer an identity and drop its weights."""
        if self.pruned:
            raise ContractError("attention sublayer already removed from this block")
        self.pruned = True
        for name in self.ATTENTION_PARAMS:
            setattr(self, name, None)
        self.last_attention = None
        self.last_masked_attention = None

    # -- sublayers -------------------------------------------------------

    def _norm1(self, h: Tensor) -> Tensor:
        return layer_norm(h) * self.ln1_g + self.ln1_b

    def _norm2(self, h: Tensor) -> Tensor:
        return layer_norm(h) * self.ln2_g + self.ln2_b

    def attention_sublayer(self, h: Tensor, training: bool,
                           rng: np.random.Generator | None,
                           collect_attention: bool) -> Tensor:
        """Masked multi-head self-attention on [batch, S, d_model] tokens."""
        cfg = self.cfg
        x = self._norm1(h) if cfg.norm_placement == "pre" else h
        batch, s, d = x.shape
        hds, dh = cfg.heads, cfg.d_head

        q = x @ self.w_q + self.b_q
        k = x @ self.w_k + self.b_k
        v = x @ self.w_v + self.b_v
        # [batch, S, d] -> [batch, H, S, d_head]
        q = q.reshape(batch, s, hds, dh).transpose(0, 2, 1, 3)
        k = k.reshape(batch, s, hds, dh).transpose(0, 2, 1, 3)
        v = v.reshape(batch, s, hds, dh).transpose(0, 2, 1, 3)

        scores = (q @ k.transpose()) * (1.0 / math.sqrt(dh))
        attention = row_softmax(scores)          # [batch, H, S, S]
        masked = attention * self.mask           # mask broadcast over batch
        if collect_attention:
            self.last_attention = attention
            self.last_masked_attention = masked

        ctx = masked @ v                          # [batch, H, S, d_head]
        ctx = ctx.transpose(0, 2, 1, 3).reshape(batch, s, d)
        out = ctx @ self.w_e + self.b_e
        if training and cfg.dropout > 0.0:
            out = dropout(out, cfg.dropout, rng)
        out = h + out
        return self._norm1(out) if cfg.norm_placement == "post" else out

    def ffn_sublayer(self, h: Tensor, training: bool,
                     rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        x = self._norm2(h) if cfg.norm_placement == "pre" else h
        act = gelu if cfg.activation == "gelu" else relu
        z = act(x @ self.w1 + self.b1)
        if training and cfg.dropout > 0.0:
            z = dropout(z, cfg.dropout, rng)
        z = z @ self.w2 + self.b2
        if training and cfg.dropout > 0.0:
            z = dropout(z, cfg.dropout, rng)
        out = h + z
        return self._norm2(out) if cfg.norm_placement == "post" else out

    def forward(self, h: Tensor, training: bool = False,
                rng: np.random.Generator | None = None,
                collect_attention: bool = False) -> Tensor:
        if not self.pruned:
            h = self.attention_sublayer(h, training, rng, collect_attention)
        return self.ffn_sublayer(h, training, rng)


class Forecaster:
    """Configurable forecaster mapping [batch, L, C] to [batch, T, C]."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, s = cfg.d_model, cfg.token_count
        if cfg.mode == "temporal_tokens":
            self.embed_w = _param(_xavier(rng, cfg.patch_len, d))
            self.pos_emb = _param(rng.normal(0.0, 0.02, size=(s, d)))
        else:
            self.embed_w = _param(_xavier(rng, cfg.lookback, d))
            self.pos_emb = None
        self.embed_b = _param(np.zeros(d))
        self.blocks = [AttentionBlock(cfg, rng) for _ in range(cfg.layers)]
        if cfg.norm_placement == "pre":
            self.final_g = _param(np.ones(d))
            self.final_b = _param(np.zeros(d))
        else:
            self.final_g = None
            self.final_b = None
        if cfg.mode == "temporal_tokens":
            self.head_w = _param(_xavier(rng, s * d, cfg.horizon))
        else:
            self.head_w = _param(_xavier(rng, d, cfg.horizon))
        self.head_b = _param(np.zeros(cfg.horizon))

    # -- parameter plumbing ----------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [("embed.w", self.embed_w), ("embed.b", self.embed_b)]
        if self.pos_emb is not None:
            params.append(("embed.pos", self.pos_emb))
        for i, blk in enumerate(self.blocks):
            params.extend((f"blocks.{i}.{n}", p) for n, p in blk.named_parameters())
        if self.final_g is not None:
            params.extend([("final_norm.g", self.final_g),
                           ("final_norm.b", self.final_b)])
        params.extend([("head.w", self.head_w), ("head.b", self.head_b)])
        return params

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def masks(self) -> list[Tensor]:
        return [blk.mask for blk in self.blocks]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
        for m in self.masks():
            m.zero_grad()

    def pruned_layers(self) -> list[int]:
        return [i for i, blk in enumerate(self.blocks) if blk.pruned]

    # -- forward ----------------------------------------------------------

    def _validate_input(self, x: np.ndarray) -> None:
        if x.ndim != 3:
            raise ShapeError(f"expected [batch, L, C] input, got shape {x.shape}")
        if x.shape[1] != self.cfg.lookback:
            raise ShapeError(f"input lookback {x.shape[1]} does not match "
                             f"configured lookback {self.cfg.lookback}")
        if self.cfg.mode == "variate_tokens" and x.shape[2] != self.cfg.channels:
            raise ShapeError(f"variate-token model expects {self.cfg.channels} "
                             f"channels, got {x.shape[2]}")

    def _embed(self, x: np.ndarray, training: bool,
               rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        batch, length, channels = x.shape
        if cfg.mode == "temporal_tokens":
            # fold channels into the batch: [B, L, C] -> [B*C, L]
            series = Tensor(np.transpose(x, (0, 2, 1)).reshape(batch * channels, length))
            if cfg.end_padding:
                series = pad_repeat_last(series, cfg.patch_stride)
            patches = unfold_last(series, cfg.patch_len, cfg.patch_stride)
            tokens = patches @ self.embed_w + self.embed_b + self.pos_emb
        else:
            # each channel's full window is one token: [B, L, C] -> [B, C, L]
            series = Tensor(np.transpose(x, (0, 2, 1)))
            tokens = series @ self.embed_w + self.embed_b
        if training and cfg.dropout > 0.0:
            tokens = dropout(tokens, cfg.dropout, rng)
        return tokens

    def encode(self, x: np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None,
               collect_attention: bool = False) -> Tensor:
        """Token embeddings after the encoder stack, before the head."""
        self._validate_input(x)
        h = self._embed(x, training, rng)
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h, training, rng, collect_attention)
            if np.isnan(h.data).any():
                raise NumericError(f"NaN activations after encoder block {i}")
        if self.final_g is not None:
            h = layer_norm(h) * self.final_g + self.final_b
        return h

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None,
                collect_attention: bool = False) -> Tensor:
        """Differentiable forecast of shape [batch, T, C]."""
        cfg = self.cfg
        self._validate_input(x)
        batch, _, channels = x.shape
        if cfg.instance_norm:
            mu = x.mean(axis=1, keepdims=True)
            sigma = np.sqrt(x.var(axis=1, keepdims=True) + INSTANCE_NORM_EPS)
            x = (x - mu) / sigma

        h = self.encode(x, training, rng, collect_attention)
        if cfg.mode == "temporal_tokens":
            # [B*C, S, d] -> [B*C, S*d] -> [B*C, T] -> [B, T, C]
            flat = h.reshape(batch * channels, -1)
            out = (flat @ self.head_w + self.head_b).reshape(batch, channels, cfg.horizon)
        else:
            # [B, C, d] -> [B, C, T] -> [B, T, C]
            out = h @ self.head_w + self.head_b
        out = out.transpose(0, 2, 1)

        if cfg.instance_norm:
            out = out * Tensor(sigma) + Tensor(mu)
        if np.isnan(out.data).any():
            raise NumericError("NaN activations in forecast head")
        return out

    def forecast(self, x: np.ndarray) -> np.ndarray:
        """Deterministic eval-mode prediction (dropout disabled, no tape)."""
        return self.forward(x, training=False).data

    # -- state ------------------------------------------------------------

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for i, blk in enumerate(self.blocks):
            state[f"blocks.{i}.mask"] = blk.mask.data.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ContractError(f"state dict missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: stored shape "
                                 f"{state[name].shape} != model shape {p.data.shape}")
            p.data = state[name].copy()
        for i, blk in enumerate(self.blocks):
            key = f"blocks.{i}.mask"
            if key in state:
                blk.mask = Tensor(state[key].copy())


def clone_model(model: Forecaster) -> Forecaster:
    """Independent copy with identical weights, masks and pruned flags."""
    twin = Forecaster(model.cfg, seed=0)
    for i, blk in enumerate(model.blocks):
        if blk.pruned:
            twin.blocks[i].remove_attention()
    twin.load_state_dict(model.state_dict())
    return twin


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element of the batch."""
    t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != "
                         f"target shape {t.shape}")
    diff = pred - t
    return (diff * diff).mean()
