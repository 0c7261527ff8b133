"""Patch-transformer encoder-decoder for single-page visual question answering.

The encoder turns the fused question+page patch sequence into a contextual
feature matrix; the decoder generates the answer character by character with
cross-attention over that feature. Deliberately small: the retrieval
mechanism built on top is backbone-agnostic, so a desk-scale transformer
stands in for a large pretrained one.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import BudgetError, ConfigError, NumericError
from .layers import (
    apply_layer_norm,
    ffn,
    glorot,
    init_attention,
    init_ffn,
    init_layer_norm,
    linear,
    multi_head_attention,
)
from .render import PatchGrid

PRINTABLE_ASCII = string.printable[:-5]  # digits+letters+punctuation+space, no control chars

PAD, BOS, EOS = 0, 1, 2
N_SPECIALS = 3

NEG_MASK = -1e30


class Vocab:
    """Character vocabulary with PAD/BOS/EOS bookkeeping."""

    def __init__(self, chars: str):
        if len(set(chars)) != len(chars):
            raise ConfigError("vocabulary characters must be unique")
        if not chars:
            raise ConfigError("vocabulary must contain at least one character")
        self.chars = chars
        self._to_id = {ch: i + N_SPECIALS for i, ch in enumerate(chars)}

    @property
    def size(self) -> int:
        return len(self.chars) + N_SPECIALS

    def encode_answer(self, text: str) -> np.ndarray:
        """Character ids followed by EOS."""
        try:
            ids = [self._to_id[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None
        return np.array(ids + [EOS], dtype=np.intp)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i >= N_SPECIALS:
                out.append(self.chars[i - N_SPECIALS])
        return "".join(out)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    patch_size: int = 16
    max_patches: int = 2048
    vocab_chars: str = PRINTABLE_ASCII
    max_answer_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.n_enc_layers, self.n_dec_layers, self.max_answer_len, self.patch_size, self.max_patches) < 1:
            raise ConfigError("layer counts, lengths and sizes must be positive")
        Vocab(self.vocab_chars)  # validates uniqueness


@dataclass
class EncoderFeature:
    """Contextual per-patch vectors shared by the decoder and the scorer."""

    vectors: Tensor

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def array(self) -> np.ndarray:
        return self.vectors.data

    def __post_init__(self):
        if self.vectors.data.ndim != 2 or self.length < 1:
            raise ValueError("encoder feature must be a non-empty (length, d_model) matrix")


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_MASK), k=1)


class VqaModel:
    """Encoder-decoder over patch sequences with character-level decoding."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.vocab = Vocab(cfg.vocab_chars)
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        patch_dim = cfg.patch_size**2
        p: dict[str, Tensor] = {}

        # Position tables are initialized at a scale comparable to projected
        # patch content, so position-keyed attention is available early.
        p["embed.proj_w"] = Tensor(glorot(rng, patch_dim, cfg.d_model), requires_grad=True)
        p["embed.proj_b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        p["embed.row_emb"] = Tensor(rng.normal(0.0, 0.3, (cfg.max_patches, cfg.d_model)), requires_grad=True)
        p["embed.col_emb"] = Tensor(rng.normal(0.0, 0.3, (cfg.max_patches, cfg.d_model)), requires_grad=True)

        for i in range(cfg.n_enc_layers):
            init_layer_norm(p, f"enc.{i}.ln1", cfg.d_model)
            init_attention(p, f"enc.{i}.attn", cfg.d_model, rng)
            init_layer_norm(p, f"enc.{i}.ln2", cfg.d_model)
            init_ffn(p, f"enc.{i}.ffn", cfg.d_model, cfg.d_ff, rng)
        init_layer_norm(p, "enc.final_ln", cfg.d_model)

        p["dec.tok_emb"] = Tensor(rng.normal(0.0, 0.3, (self.vocab.size, cfg.d_model)), requires_grad=True)
        p["dec.pos_emb"] = Tensor(rng.normal(0.0, 0.3, (cfg.max_answer_len + 1, cfg.d_model)), requires_grad=True)
        for i in range(cfg.n_dec_layers):
            init_layer_norm(p, f"dec.{i}.ln1", cfg.d_model)
            init_attention(p, f"dec.{i}.self_attn", cfg.d_model, rng)
            init_layer_norm(p, f"dec.{i}.ln2", cfg.d_model)
            init_attention(p, f"dec.{i}.cross_attn", cfg.d_model, rng)
            init_layer_norm(p, f"dec.{i}.ln3", cfg.d_model)
            init_ffn(p, f"dec.{i}.ffn", cfg.d_model, cfg.d_ff, rng)
        init_layer_norm(p, "dec.final_ln", cfg.d_model)
        p["dec.out_w"] = Tensor(glorot(rng, cfg.d_model, self.vocab.size), requires_grad=True)
        p["dec.out_b"] = Tensor(np.zeros(self.vocab.size), requires_grad=True)
        return p

    # ----- encoder -----

    def embed_patches(self, grid: PatchGrid) -> Tensor:
        """Affine projection of each patch plus learned row and column embeddings.

        Patch values are recentered so the white background maps to zero;
        this removes the large shared component an all-ones background would
        otherwise inject into every embedding (a fixed bias absorbed into
        the affine map).
        """
        cfg = self.cfg
        if grid.n_patches > cfg.max_patches:
            raise BudgetError(f"grid has {grid.n_patches} patches, budget is {cfg.max_patches}")
        if grid.patch_size != cfg.patch_size:
            raise ConfigError(f"grid patch size {grid.patch_size} != model patch size {cfg.patch_size}")
        rows, cols = grid.row_col_indices()
        p = self.params
        projected = linear(Tensor(grid.patches - 1.0), p["embed.proj_w"], p["embed.proj_b"])
        return projected + ag.take_rows(p["embed.row_emb"], rows) + ag.take_rows(p["embed.col_emb"], cols)

    def encode(self, embeddings: Tensor) -> EncoderFeature:
        if embeddings.shape[0] < 1:
            raise ValueError("cannot encode an empty embedding sequence")
        cfg, p = self.cfg, self.params
        x = embeddings
        for i in range(cfg.n_enc_layers):
            a = apply_layer_norm(x, p, f"enc.{i}.ln1")
            x = x + multi_head_attention(a, a, p, f"enc.{i}.attn", cfg.n_heads)
            b = apply_layer_norm(x, p, f"enc.{i}.ln2")
            x = x + ffn(b, p, f"enc.{i}.ffn")
            if not np.isfinite(x.data).all():
                raise NumericError(f"encoder layer {i} produced non-finite values")
        return EncoderFeature(apply_layer_norm(x, p, "enc.final_ln"))

    def encode_grid(self, grid: PatchGrid) -> EncoderFeature:
        return self.encode(self.embed_patches(grid))

    # ----- decoder -----

    def _decode_logits(self, feature: EncoderFeature, tokens_in: np.ndarray) -> Tensor:
        cfg, p = self.cfg, self.params
        n = len(tokens_in)
        x = ag.take_rows(p["dec.tok_emb"], tokens_in) + ag.take_rows(p["dec.pos_emb"], np.arange(n))
        mask = _causal_mask(n)
        for i in range(cfg.n_dec_layers):
            a = apply_layer_norm(x, p, f"dec.{i}.ln1")
            x = x + multi_head_attention(a, a, p, f"dec.{i}.self_attn", cfg.n_heads, mask=mask)
            b = apply_layer_norm(x, p, f"dec.{i}.ln2")
            x = x + multi_head_attention(b, feature.vectors, p, f"dec.{i}.cross_attn", cfg.n_heads)
            c = apply_layer_norm(x, p, f"dec.{i}.ln3")
            x = x + ffn(c, p, f"dec.{i}.ffn")
        x = apply_layer_norm(x, p, "dec.final_ln")
        return linear(x, p["dec.out_w"], p["dec.out_b"])

    def vqa_loss(self, feature: EncoderFeature, answer: str) -> Tensor:
        """Mean token-level cross-entropy of teacher-forced decoding."""
        if len(answer) > self.cfg.max_answer_len:
            raise ValueError(f"answer length {len(answer)} exceeds max_answer_len {self.cfg.max_answer_len}")
        target = self.vocab.encode_answer(answer)
        if len(target) == 0 or target[-1] != EOS:
            raise ValueError("target must be non-empty and end with EOS")
        tokens_in = np.concatenate(([BOS], target[:-1]))
        logits = self._decode_logits(feature, tokens_in)
        log_probs = ag.log_softmax_last(logits)
        onehot = np.zeros((len(target), self.vocab.size))
        onehot[np.arange(len(target)), target] = 1.0
        picked = ag.sum_axis(ag.mul(log_probs, onehot), axis=-1)
        return -ag.mean_axis(picked)

    def generate_answer(self, feature: EncoderFeature, max_answer_len: int | None = None) -> str:
        """Greedy decoding from BOS until EOS or the length cap."""
        limit = self.cfg.max_answer_len if max_answer_len is None else min(max_answer_len, self.cfg.max_answer_len)
        tokens = [BOS]
        with ag.no_grad():
            for _ in range(limit):
                logits = self._decode_logits(feature, np.array(tokens, dtype=np.intp))
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == EOS:
                    break
                tokens.append(nxt)
        return self.vocab.decode(tokens[1:])


def parameter_gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate and collect one gradient per named parameter.

    Parameters the loss does not depend on get an exactly-zero gradient.
    Raises NumericError if the loss or any gradient is non-finite.
    """
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is non-finite")
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"gradient for {name} is non-finite")
        grads[name] = g
    return grads
