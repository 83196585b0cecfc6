"""Miniature pre-norm transformer classifier with two read-out heads.

The symmetric-task head reads the extra classification token at position 1;
the standard head reads the first token at position 0. Both heads are single
affine maps and both always exist, so a pair-task checkpoint can later be
fine-tuned on single-input tasks through the standard head without surgery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import SentencePair
from .objective import as_probabilities
from .tokenizer import (
    CLS_POSITION,
    CLSPARA_ID,
    CLSPARA_POSITION,
    EncodedInput,
    Vocabulary,
    encode_pair,
)

HEADS = ("clspara", "cls")
ROLES = ("randomly_initialized", "symmetric_finetuned", "transferred")

INIT_STD = 0.02
INIT_TRUNC = 2.0  # truncate the init distribution at +-2 sigma


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    d_model: int
    d_ff: int
    max_len: int
    vocab_size: int
    num_classes: int = 2
    dropout: float = 0.0

    def __post_init__(self) -> None:
        for name in ("layers", "heads", "d_model", "d_ff", "max_len", "vocab_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelState:
    """Named parameter tensors plus a provenance role tag."""

    config: ModelConfig
    params: dict[str, Tensor]
    role: str = "randomly_initialized"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


@dataclass(frozen=True)
class DualPassOutput:
    """Softmax outputs and argmax labels for both orderings of one pair."""

    p_l2r: np.ndarray
    p_r2l: np.ndarray
    label_l2r: int
    label_r2l: int
    example_id: str

    def __post_init__(self) -> None:
        as_probabilities(self.p_l2r)
        as_probabilities(self.p_r2l)
        # argmax with ties resolved toward the lower class id
        if self.label_l2r != int(np.argmax(self.p_l2r)):
            raise ValueError("label_l2r is not the argmax of p_l2r")
        if self.label_r2l != int(np.argmax(self.p_r2l)):
            raise ValueError("label_r2l is not the argmax of p_r2l")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor's shape, fully determined by the config."""
    d, f, c = config.d_model, config.d_ff, config.num_classes
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb.weight": (config.vocab_size, d),
        "pos_emb.weight": (config.max_len, d),
    }
    for i in range(config.layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.ln1.gain"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.attn.{proj}.bias"] = (d,)
        shapes[f"{prefix}.ln2.gain"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.ffn.w1.weight"] = (d, f)
        shapes[f"{prefix}.ffn.w1.bias"] = (f,)
        shapes[f"{prefix}.ffn.w2.weight"] = (f, d)
        shapes[f"{prefix}.ffn.w2.bias"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["head_cls.weight"] = (d, c)
    shapes["head_cls.bias"] = (c,)
    shapes["head_clspara.weight"] = (d, c)
    shapes["head_clspara.bias"] = (c,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = INIT_TRUNC * INIT_STD
    out = rng.normal(0.0, INIT_STD, size=shape)
    bad = np.abs(out) > bound
    while bad.any():  # resample out-of-bound draws; terminates fast (P(bad) ~ 0.05)
        out[bad] = rng.normal(0.0, INIT_STD, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Truncated-normal weights, unit layer-norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = _truncated_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return ModelState(config=config, params=params, role="randomly_initialized")


def head_position(head: str) -> int:
    """Sequence position each read-out head consumes."""
    if head == "cls":
        return CLS_POSITION
    if head == "clspara":
        return CLSPARA_POSITION
    raise ValueError(f"unknown head {head!r}")


def _affine(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def forward_batch(
    state: ModelState,
    token_ids: np.ndarray,
    attention_mask: np.ndarray,
    head: str,
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> Tensor:
    """Logits [batch, num_classes] for already-encoded inputs [batch, max_len]."""
    cfg = state.config
    token_ids = np.asarray(token_ids)
    attention_mask = np.asarray(attention_mask)
    if token_ids.ndim != 2 or token_ids.shape[1] != cfg.max_len:
        raise ValueError(f"token_ids must be [batch, {cfg.max_len}], got {token_ids.shape}")
    if head == "clspara" and not np.all(token_ids[:, CLSPARA_POSITION] == CLSPARA_ID):
        raise ValueError(
            "clspara head requires inputs encoded with use_clspara=True "
            "([CLSPara] missing at position 1)"
        )
    params = state.params
    p_drop = cfg.dropout if train_mode else 0.0
    rng = np.random.default_rng(np.random.SeedSequence([dropout_seed]))
    key_mask = attention_mask[:, None, :]  # broadcast over query rows
    dh = cfg.d_model // cfg.heads

    x = ad.add(
        ad.embedding(params["tok_emb.weight"], token_ids),
        ad.embedding(params["pos_emb.weight"], np.arange(cfg.max_len)),
    )
    x = ad.dropout(x, p_drop, rng)
    for i in range(cfg.layers):
        prefix = f"layers.{i}"
        h = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        q = _affine(h, params, f"{prefix}.attn.wq")
        k = _affine(h, params, f"{prefix}.attn.wk")
        v = _affine(h, params, f"{prefix}.attn.wv")
        head_outs = []
        for j in range(cfg.heads):
            lo, hi = j * dh, (j + 1) * dh
            head_outs.append(
                ad.scaled_dot_attention(
                    ad.slice_lastdim(q, lo, hi),
                    ad.slice_lastdim(k, lo, hi),
                    ad.slice_lastdim(v, lo, hi),
                    key_mask,
                )
            )
        attn = _affine(ad.concat(head_outs, axis=-1), params, f"{prefix}.attn.wo")
        x = ad.add(x, ad.dropout(attn, p_drop, rng))
        h = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        ff = _affine(ad.gelu(_affine(h, params, f"{prefix}.ffn.w1")), params, f"{prefix}.ffn.w2")
        x = ad.add(x, ad.dropout(ff, p_drop, rng))
    x = ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    pooled = ad.select_axis(x, axis=1, index=head_position(head))
    head_name = "head_clspara" if head == "clspara" else "head_cls"
    return _affine(pooled, params, head_name)


def forward(
    state: ModelState,
    enc: EncodedInput,
    head: str,
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> Tensor:
    """Logits [num_classes] for a single encoded input."""
    batch = forward_batch(
        state,
        enc.token_ids[None, :],
        enc.attention_mask[None, :],
        head,
        train_mode=train_mode,
        dropout_seed=dropout_seed,
    )
    return ad.select_axis(batch, axis=0, index=0)


def _eval_probs(state: ModelState, ids: np.ndarray, mask: np.ndarray, head: str) -> np.ndarray:
    logits = forward_batch(state, ids, mask, head, train_mode=False)
    return ad.softmax(logits, axis=-1).data


def dual_forward(
    state: ModelState,
    a: str,
    b: str,
    vocab: Vocabulary,
    config: ModelConfig | None = None,
    example_id: str = "",
) -> DualPassOutput:
    """Evaluate one pair in both orders through the symmetric-task head."""
    cfg = config or state.config
    enc_l2r = encode_pair(vocab, a, b, use_clspara=True, max_len=cfg.max_len)
    enc_r2l = encode_pair(vocab, b, a, use_clspara=True, max_len=cfg.max_len)
    ids = np.stack([enc_l2r.token_ids, enc_r2l.token_ids])
    mask = np.stack([enc_l2r.attention_mask, enc_r2l.attention_mask])
    probs = _eval_probs(state, ids, mask, head="clspara")
    return DualPassOutput(
        p_l2r=probs[0],
        p_r2l=probs[1],
        label_l2r=int(np.argmax(probs[0])),
        label_r2l=int(np.argmax(probs[1])),
        example_id=example_id,
    )


def dual_forward_dataset(
    state: ModelState,
    pairs: Sequence[SentencePair],
    vocab: Vocabulary,
    batch_size: int = 64,
) -> list[DualPassOutput]:
    """Dual passes over a list of pairs, batched for throughput."""
    cfg = state.config
    outputs: list[DualPassOutput] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        enc_l2r = [encode_pair(vocab, ex.text_a, ex.text_b, True, cfg.max_len) for ex in chunk]
        enc_r2l = [encode_pair(vocab, ex.text_b, ex.text_a, True, cfg.max_len) for ex in chunk]
        ids = np.stack([e.token_ids for e in enc_l2r] + [e.token_ids for e in enc_r2l])
        mask = np.stack(
            [e.attention_mask for e in enc_l2r] + [e.attention_mask for e in enc_r2l]
        )
        probs = _eval_probs(state, ids, mask, head="clspara")
        n = len(chunk)
        for i, ex in enumerate(chunk):
            outputs.append(
                DualPassOutput(
                    p_l2r=probs[i],
                    p_r2l=probs[n + i],
                    label_l2r=int(np.argmax(probs[i])),
                    label_r2l=int(np.argmax(probs[n + i])),
                    example_id=ex.example_id,
                )
            )
    return outputs
