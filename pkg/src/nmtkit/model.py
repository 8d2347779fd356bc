"""Encoder-decoder Transformer on top of :mod:`nmtkit.autodiff`.

The model follows the bottom / body / top / loss split: ``bottom`` embeds ids,
``encode``/``decode_train`` are the body, ``top`` projects to vocabulary
logits and ``loss`` is masked token-level cross-entropy.

Parameters are plain name -> array mappings so that checkpoints, optimizers
and replicas can treat them uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hparams import HParams
from .registry import models

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
MASK_VALUE = -1e9


@dataclass
class AttentionRecord:
    layer: int
    head: int
    kind: str  # "self" | "causal-self" | "encdec"
    weights: np.ndarray  # [query_len, key_len]
    batch_index: int = 0


def causal_mask(length: int) -> np.ndarray:
    """Boolean allow-matrix: query ``i`` may attend to key ``j`` iff ``j <= i``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


def positional_encoding(length: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def shift_right(tgt: np.ndarray) -> np.ndarray:
    """Teacher-forcing decoder input: EOS doubles as the start symbol."""
    tgt = np.asarray(tgt)
    out = np.empty_like(tgt)
    out[..., 0] = EOS_ID
    out[..., 1:] = tgt[..., :-1]
    return out


def multi_head_attention(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         wo: Tensor, num_heads: int, allow: np.ndarray | None = None,
                         record: list | None = None, layer: int = 0,
                         kind: str = "self") -> Tensor:
    """Scaled dot-product attention over ``num_heads`` heads.

    ``allow`` is a boolean array broadcastable to ``[batch, q_len, k_len]``;
    disallowed logits receive ``MASK_VALUE`` before the softmax.
    """
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    if d % num_heads:
        raise ValueError(f"d_model={d} not divisible by num_heads={num_heads}")
    dk = d // num_heads
    q = ad.transpose(ad.reshape(ad.linear(q_in, wq), (b, tq, num_heads, dk)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(ad.linear(kv_in, wk), (b, tk, num_heads, dk)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(ad.linear(kv_in, wv), (b, tk, num_heads, dk)), (0, 2, 1, 3))
    scores = ad.matmul(q, k) * (1.0 / math.sqrt(dk))
    if allow is not None:
        allow = np.asarray(allow, dtype=bool)
        try:
            allow = np.broadcast_to(allow, (b, tq, tk))
        except ValueError:
            raise ValueError(f"mask shape {allow.shape} incompatible with {(b, tq, tk)}") from None
        bias = np.where(allow, 0.0, MASK_VALUE)[:, None, :, :]
        scores = scores + np.broadcast_to(bias, scores.shape)
    weights = ad.softmax(scores, axis=-1)
    if record is not None:
        w = weights.value
        for bi in range(b):
            for h in range(num_heads):
                record.append(AttentionRecord(layer, h, kind, w[bi, h].copy(), bi))
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return ad.linear(ctx, wo)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ad.linear(ad.relu(ad.linear(x, w1, b1)), w2, b2)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float) -> np.ndarray:
    limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Transformer:
    name = "transformer"

    def __init__(self, hp: HParams, src_vocab_size: int, tgt_vocab_size: int | None = None):
        tgt_vocab_size = tgt_vocab_size or src_vocab_size
        if hp.share_embeddings and src_vocab_size != tgt_vocab_size:
            raise ValueError("shared embeddings need equal source/target vocab sizes")
        self.hp = hp
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self._pe = positional_encoding(hp.max_length, hp.d_model)

    # -- parameters -------------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        hp = self.hp
        d, f = hp.d_model, hp.d_ff
        shapes: dict[str, tuple[int, ...]] = {}
        if hp.share_embeddings:
            shapes["shared/emb"] = (self.src_vocab_size, d)
        else:
            shapes["encoder/emb"] = (self.src_vocab_size, d)
            shapes["decoder/emb"] = (self.tgt_vocab_size, d)
            shapes["decoder/softmax_w"] = (d, self.tgt_vocab_size)

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                shapes[f"{prefix}/w{w}"] = (d, d)

        def ffn(prefix):
            shapes[f"{prefix}/w1"] = (d, f)
            shapes[f"{prefix}/b1"] = (f,)
            shapes[f"{prefix}/w2"] = (f, d)
            shapes[f"{prefix}/b2"] = (d,)

        def norm(prefix):
            shapes[f"{prefix}/gain"] = (d,)
            shapes[f"{prefix}/bias"] = (d,)

        for i in range(hp.num_layers):
            p = f"encoder/layer_{i}"
            attn(f"{p}/self_attention")
            norm(f"{p}/norm_0")
            ffn(f"{p}/ffn")
            norm(f"{p}/norm_1")
        for i in range(hp.num_layers):
            p = f"decoder/layer_{i}"
            attn(f"{p}/self_attention")
            norm(f"{p}/norm_0")
            attn(f"{p}/encdec_attention")
            norm(f"{p}/norm_1")
            ffn(f"{p}/ffn")
            norm(f"{p}/norm_2")
        if hp.norm_type == "pre":
            norm("encoder/final_norm")
            norm("decoder/final_norm")
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d = self.hp.d_model
        params = {}
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit("/", 1)[1]
            if leaf == "emb":
                params[name] = rng.normal(0.0, d ** -0.5, size=shape)
            elif leaf == "gain":
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = _glorot(rng, shape[0], shape[1], self.hp.init_scale)
        return params

    # -- bottom -----------------------------------------------------------------

    def bottom(self, p: Mapping[str, Tensor], ids: np.ndarray, side: str) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[-1] > self.hp.max_length:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_length {self.hp.max_length}")
        table = p["shared/emb"] if self.hp.share_embeddings else p[f"{side}/emb"]
        x = ad.embedding(table, ids) * math.sqrt(self.hp.d_model)
        pe = np.broadcast_to(self._pe[: ids.shape[-1]], x.shape)
        return x + pe

    def top(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        w = ad.transpose(p["shared/emb"]) if self.hp.share_embeddings else p["decoder/softmax_w"]
        return ad.linear(x, w)

    # -- body -------------------------------------------------------------------

    def _sublayer(self, p, prefix: str, x: Tensor, fn, rng) -> Tensor:
        hp = self.hp
        keep = 1.0 - hp.dropout
        if hp.norm_type == "pre":
            y = fn(ad.layer_norm(x, p[f"{prefix}/gain"], p[f"{prefix}/bias"], hp.layer_norm_epsilon))
            return x + ad.dropout(y, keep, rng)
        y = ad.dropout(fn(x), keep, rng)
        return ad.layer_norm(x + y, p[f"{prefix}/gain"], p[f"{prefix}/bias"], hp.layer_norm_epsilon)

    def _attn_fn(self, p, prefix, kv, allow, record, layer, kind):
        h = self.hp.num_heads

        def fn(x):
            return multi_head_attention(
                x, x if kv is None else kv, p[f"{prefix}/wq"], p[f"{prefix}/wk"],
                p[f"{prefix}/wv"], p[f"{prefix}/wo"], h, allow, record, layer, kind)
        return fn

    def _ffn_fn(self, p, prefix):
        return lambda x: feed_forward(x, p[f"{prefix}/w1"], p[f"{prefix}/b1"],
                                      p[f"{prefix}/w2"], p[f"{prefix}/b2"])

    def _check_ids(self, ids: np.ndarray, vocab: int) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"token id out of range [0, {vocab})")

    def encode(self, p: Mapping[str, Tensor], src: np.ndarray, rng=None,
               record: list | None = None) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        self._check_ids(src, self.src_vocab_size)
        hp = self.hp
        x = ad.dropout(self.bottom(p, src, "encoder"), 1.0 - hp.dropout, rng)
        allow = (src != PAD_ID)[:, None, :]
        for i in range(hp.num_layers):
            pre = f"encoder/layer_{i}"
            x = self._sublayer(p, f"{pre}/norm_0", x,
                               self._attn_fn(p, f"{pre}/self_attention", None, allow, record, i, "self"), rng)
            x = self._sublayer(p, f"{pre}/norm_1", x, self._ffn_fn(p, f"{pre}/ffn"), rng)
        if hp.norm_type == "pre":
            x = ad.layer_norm(x, p["encoder/final_norm/gain"], p["encoder/final_norm/bias"],
                              hp.layer_norm_epsilon)
        return x

    def decode_body(self, p: Mapping[str, Tensor], dec_in: np.ndarray, enc_out: Tensor,
                    src: np.ndarray, rng=None, record: list | None = None) -> Tensor:
        dec_in = np.asarray(dec_in, dtype=np.int64)
        self._check_ids(dec_in, self.tgt_vocab_size)
        hp = self.hp
        if enc_out.shape[0] != dec_in.shape[0]:
            raise ValueError(f"batch mismatch: encoder {enc_out.shape[0]} vs decoder {dec_in.shape[0]}")
        t = dec_in.shape[1]
        x = ad.dropout(self.bottom(p, dec_in, "decoder"), 1.0 - hp.dropout, rng)
        self_allow = causal_mask(t)[None, :, :]
        src_allow = (np.asarray(src) != PAD_ID)[:, None, :]
        for i in range(hp.num_layers):
            pre = f"decoder/layer_{i}"
            x = self._sublayer(p, f"{pre}/norm_0", x, self._attn_fn(
                p, f"{pre}/self_attention", None, self_allow, record, i, "causal-self"), rng)
            x = self._sublayer(p, f"{pre}/norm_1", x, self._attn_fn(
                p, f"{pre}/encdec_attention", enc_out, src_allow, record, i, "encdec"), rng)
            x = self._sublayer(p, f"{pre}/norm_2", x, self._ffn_fn(p, f"{pre}/ffn"), rng)
        if hp.norm_type == "pre":
            x = ad.layer_norm(x, p["decoder/final_norm/gain"], p["decoder/final_norm/bias"],
                              hp.layer_norm_epsilon)
        return x

    def decode_train(self, p: Mapping[str, Tensor], tgt: np.ndarray, enc_out: Tensor,
                     src: np.ndarray, rng=None, record: list | None = None) -> Tensor:
        """Teacher-forced logits ``[batch, tgt_len, vocab]`` for gold targets ``tgt``."""
        body = self.decode_body(p, shift_right(tgt), enc_out, src, rng, record)
        return self.top(p, body)

    def logits(self, p: Mapping[str, Tensor], src: np.ndarray, tgt: np.ndarray, rng=None,
               record: list | None = None) -> Tensor:
        enc = self.encode(p, src, rng, record)
        return self.decode_train(p, tgt, enc, src, rng, record)

    def loss_and_metrics(self, p: Mapping[str, Tensor], src, tgt, rng=None) -> tuple[Tensor, dict]:
        tgt = np.asarray(tgt)
        logits = self.logits(p, src, tgt, rng)
        mask = tgt != PAD_ID
        value = loss(logits, tgt, mask)
        pred = np.argmax(logits.value, axis=-1)
        return value, {"correct": int(((pred == tgt) & mask).sum()), "tokens": int(mask.sum())}


def loss(logits: Tensor, tgt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Cross-entropy averaged over positions where ``mask`` is true."""
    tgt = np.asarray(tgt, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != tgt.shape or mask.shape != tgt.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {tgt.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("all-pad batch has no tokens to score")
    picked = ad.gather_last(ad.log_softmax(logits, axis=-1), np.where(mask, tgt, 0))
    return ad.reduce_sum(picked * mask.astype(np.float64)) * (-1.0 / count)


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor._wrap(np.asarray(v)) for k, v in params.items()}


models.add("transformer", Transformer)
