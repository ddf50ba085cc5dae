"""Deterministic toy self-attention text encoder.

Turns a prompt into a fixed-length token sequence with content /
context-aggregating type tags, runs a small multi-head self-attention stack
over seeded embeddings, and exposes the per-head attention maps of any block.
All randomness comes from the seed in EncoderParams, so the same prompt
always produces the same condition.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidInputError, PromptTooLongError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
_NUM_SPECIAL = 3


class TokenType(Enum):
    CONTENT = "content"
    CTX_AGG = "ctx_agg"


@dataclass(frozen=True)
class EncoderParams:
    vocab_size: int = 256
    d_model: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    seq_len: int = 16
    seed: int = 10

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if self.n_blocks < 1:
            raise InvalidInputError("need at least one block")
        if self.seq_len < 4:
            raise InvalidInputError("seq_len must be >= 4")
        if self.vocab_size <= _NUM_SPECIAL:
            raise InvalidInputError("vocab_size too small")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    types: tuple[TokenType, ...]
    texts: tuple[str, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.types) or len(self.ids) != len(self.texts):
            raise InvalidInputError("ids/types/texts length mismatch")
        object.__setattr__(self, "_positions", {})

    def __len__(self) -> int:
        return len(self.ids)

    def positions_of(self, ttype: TokenType) -> list[int]:
        cached = self._positions.get(ttype)
        if cached is None:
            cached = [i for i, t in enumerate(self.types) if t is ttype]
            self._positions[ttype] = cached
        return cached


@dataclass
class Condition:
    embeddings: np.ndarray  # seq_len x d_model


def _word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return _NUM_SPECIAL + int.from_bytes(digest, "big") % (vocab_size - _NUM_SPECIAL)


def tokenize(prompt: str, params: EncoderParams) -> TokenSequence:
    """BOS + hashed lowercase words + EOS, padded to the fixed length.

    Word positions are tagged Content; BOS/EOS/PAD are context-aggregating.
    """
    words = prompt.lower().split()
    if len(words) > params.seq_len - 2:
        raise PromptTooLongError(
            f"prompt has {len(words)} words, max {params.seq_len - 2}"
        )
    ids = [BOS_ID]
    types = [TokenType.CTX_AGG]
    texts = ["<bos>"]
    for w in words:
        ids.append(_word_id(w, params.vocab_size))
        types.append(TokenType.CONTENT)
        texts.append(w)
    ids.append(EOS_ID)
    types.append(TokenType.CTX_AGG)
    texts.append("<eos>")
    while len(ids) < params.seq_len:
        ids.append(PAD_ID)
        types.append(TokenType.CTX_AGG)
        texts.append("<pad>")
    return TokenSequence(ids=tuple(ids), types=tuple(types), texts=tuple(texts))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ToyTextEncoder:
    """Seeded multi-head self-attention encoder with residual connections."""

    def __init__(self, params: EncoderParams):
        self.params = params
        p = params
        rng = np.random.default_rng([p.seed, 0])
        scale = 1.0 / np.sqrt(p.d_model)
        # unit-variance embeddings with 1/sqrt(d) weights keep attention
        # logits at O(1), so softmax rows are peaked but not saturated
        self.tok_emb = rng.normal(size=(p.vocab_size, p.d_model))
        # small positional component: repeated PAD tokens keep near-identical
        # keys, so their attention inflow is split across positions
        self.pos_emb = rng.normal(size=(p.seq_len, p.d_model)) * 0.1
        self.w_q = rng.normal(size=(p.n_blocks, p.d_model, p.d_model)) * scale
        self.w_k = rng.normal(size=(p.n_blocks, p.d_model, p.d_model)) * scale
        self.w_v = rng.normal(size=(p.n_blocks, p.d_model, p.d_model)) * scale
        self.w_o = rng.normal(size=(p.n_blocks, p.d_model, p.d_model)) * scale
        self._null: Condition | None = None
        self._pool_maps: dict[int, np.ndarray] = {}
        # (token ids, block) -> (static scaled logits, per-head K^T); the
        # map extraction path runs once per sampler step, so the
        # bias-independent projections are worth keeping around
        self._qk_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def d_head(self) -> int:
        return self.params.d_model // self.params.n_heads

    def _block_attention(
        self, x: np.ndarray, block: int, query_bias: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (new hidden state, per-head attention (H, N, N))."""
        p = self.params
        n, dh = p.seq_len, self.d_head
        q = x @ self.w_q[block]
        if query_bias is not None:
            q = q + query_bias  # same bias added to every query row
        k = x @ self.w_k[block]
        v = x @ self.w_v[block]
        q = q.reshape(n, p.n_heads, dh).transpose(1, 0, 2)
        k = k.reshape(n, p.n_heads, dh).transpose(1, 0, 2)
        v = v.reshape(n, p.n_heads, dh).transpose(1, 0, 2)
        attn = _softmax_rows(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
        out = (attn @ v).transpose(1, 0, 2).reshape(n, p.d_model)
        return x + out @ self.w_o[block], attn

    def _forward(self, tokens: TokenSequence) -> tuple[np.ndarray, list[np.ndarray]]:
        if len(tokens) != self.params.seq_len:
            raise InvalidInputError("token sequence length mismatch")
        x = self.tok_emb[list(tokens.ids)] + self.pos_emb
        attns = []
        for b in range(self.params.n_blocks):
            x, attn = self._block_attention(x, b)
            attns.append(attn)
        return x, attns

    def encode(self, tokens: TokenSequence) -> Condition:
        x, _ = self._forward(tokens)
        return Condition(embeddings=x)

    def attention_maps(self, tokens: TokenSequence) -> list[np.ndarray]:
        """Per-block, per-head row-stochastic attention maps (each H x N x N)."""
        return self._forward(tokens)[1]

    def attention_at_block(
        self, tokens: TokenSequence, block: int, query_bias: np.ndarray | None = None
    ) -> np.ndarray:
        """Attention of one block, optionally with an additive query bias."""
        return _softmax_rows(self.attention_logits(tokens, block, query_bias))

    def attention_logits(
        self, tokens: TokenSequence, block: int, query_bias: np.ndarray | None = None
    ) -> np.ndarray:
        """Scaled pre-softmax attention logits of one block (H x N x N).

        The attention map needs only the block's logits. The bias is shared
        by every query row, so its contribution to the logits is a single
        per-head row vector (bias_h K_h^T); the bias-independent logits and
        the key projections are cached per (tokens, block).
        """
        if block < 0 or block >= self.params.n_blocks:
            raise InvalidInputError(f"block {block} out of range")
        p = self.params
        n, dh = p.seq_len, self.d_head
        key = (tokens.ids, block)
        cached = self._qk_cache.get(key)
        if cached is None:
            x = self.tok_emb[list(tokens.ids)] + self.pos_emb
            for b in range(block):
                x, _ = self._block_attention(x, b)
            qh = (x @ self.w_q[block]).reshape(n, p.n_heads, dh).transpose(1, 0, 2)
            kt = np.ascontiguousarray(
                (x @ self.w_k[block]).reshape(n, p.n_heads, dh).transpose(1, 2, 0)
            )
            kt_scaled = kt / np.sqrt(dh)
            cached = (qh @ kt_scaled, kt_scaled)
            self._qk_cache[key] = cached
        logits, kt_scaled = cached
        if query_bias is not None:
            row_shift = np.einsum(
                "hd,hdn->hn", query_bias.reshape(p.n_heads, dh), kt_scaled
            )
            logits = logits + row_shift[:, None, :]
        return logits

    def null_condition(self) -> Condition:
        """Encoding of the empty prompt; computed once and cached."""
        if self._null is None:
            self._null = self.encode(tokenize("", self.params))
        return self._null

    def pool(self, c: Condition, d_c: int) -> np.ndarray:
        """Mean over token rows followed by a fixed seeded linear map to d_c."""
        if d_c not in self._pool_maps:
            rng = np.random.default_rng([self.params.seed, 1, d_c])
            self._pool_maps[d_c] = rng.normal(
                size=(self.params.d_model, d_c)
            ) / np.sqrt(self.params.d_model)
        return c.embeddings.mean(axis=0) @ self._pool_maps[d_c]
