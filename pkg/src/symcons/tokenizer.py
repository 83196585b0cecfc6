"""Whitespace tokenizer with the special tokens the classifier relies on.

A pair is laid out as ``[CLS] [CLSPara] a ... [SEP] b ... [SEP]`` (the extra
classification token is optional); single inputs as ``[CLS] a ... [SEP]``.
The [CLS] token always keeps position 0 so the standard first-token head reads
the same position with or without the extra token.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .corpus import SentencePair
from .errors import DataError

PAD, UNK, CLS, CLSPARA, SEP = "[PAD]", "[UNK]", "[CLS]", "[CLSPara]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, CLSPARA, SEP)
PAD_ID, UNK_ID, CLS_ID, CLSPARA_ID, SEP_ID = range(5)

CLS_POSITION = 0
CLSPARA_POSITION = 1


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token<->id mapping; specials occupy ids 0..4."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.id_to_token[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy ids 0..4 in fixed order")
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("token_to_id and id_to_token disagree in size")
        for i, tok in enumerate(self.id_to_token):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"vocabulary mapping is not bijective at id {i}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def build_vocab(corpus: Iterable[SentencePair], min_count: int = 1) -> Vocabulary:
    """Count whitespace tokens; keep those with count >= min_count.

    Non-special ids follow descending count, ties broken lexicographically,
    so rebuilding on the same corpus is deterministic.
    """
    counts: dict[str, int] = {}
    empty = True
    for ex in corpus:
        empty = False
        for text in (ex.text_a, ex.text_b):
            if text is None:
                continue
            for tok in text.split():
                counts[tok] = counts.get(tok, 0) + 1
    if empty:
        raise ValueError("corpus must be nonempty")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in SPECIAL_TOKENS),
        key=lambda tok: (-counts[tok], tok),
    )
    id_to_token = SPECIAL_TOKENS + tuple(kept)
    return Vocabulary(
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=id_to_token,
    )


def save_vocab(vocab: Vocabulary, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.id_to_token):
            fh.write(f"{tok}\t{i}\n")


def load_vocab(path: str | os.PathLike) -> Vocabulary:
    tokens: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
            except ValueError as exc:
                raise DataError(f"malformed vocabulary line {lineno + 1}") from exc
            if int(idx) != len(tokens):
                raise DataError(f"non-dense vocabulary id at line {lineno + 1}")
            tokens.append(tok)
    id_to_token = tuple(tokens)
    return Vocabulary(
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=id_to_token,
    )


@dataclass(frozen=True)
class EncodedInput:
    """Fixed-length id sequence with padding mask and segment ids."""

    token_ids: np.ndarray  # int64 [max_len]
    attention_mask: np.ndarray  # {0,1} [max_len]
    segment_ids: np.ndarray  # {0,1} [max_len]

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


def _finish(ids: list[int], first_sep_pos: int, max_len: int) -> EncodedInput:
    real = len(ids)
    token_ids = np.full(max_len, PAD_ID, dtype=np.int64)
    token_ids[:real] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:real] = 1
    segments = np.zeros(max_len, dtype=np.int64)
    if first_sep_pos >= 0:
        segments[first_sep_pos + 1 :] = 1
    return EncodedInput(token_ids=token_ids, attention_mask=mask, segment_ids=segments)


def encode_pair(
    vocab: Vocabulary, a: str, b: str, use_clspara: bool, max_len: int
) -> EncodedInput:
    """Encode two texts as one padded sequence.

    Overlong inputs are truncated from the tail of b first, then a; both [SEP]
    markers and at least one token of each nonempty text survive.
    """
    if max_len < 6:
        raise ValueError(f"max_len must be >= 6 for pairs, got {max_len}")
    a_ids = [vocab.id_for(tok) for tok in a.split()]
    b_ids = [vocab.id_for(tok) for tok in b.split()]
    n_special = 4 if use_clspara else 3
    budget = max_len - n_special
    floor_a = min(len(a_ids), 1)
    floor_b = min(len(b_ids), 1)
    if budget < floor_a + floor_b:
        raise ValueError(
            f"max_len={max_len} cannot hold the special tokens plus one token of each text"
        )
    while len(a_ids) + len(b_ids) > budget and len(b_ids) > floor_b:
        b_ids.pop()
    while len(a_ids) + len(b_ids) > budget and len(a_ids) > floor_a:
        a_ids.pop()
    prefix = [CLS_ID, CLSPARA_ID] if use_clspara else [CLS_ID]
    ids = prefix + a_ids + [SEP_ID] + b_ids + [SEP_ID]
    first_sep = len(prefix) + len(a_ids)
    return _finish(ids, first_sep, max_len)


def encode_single(vocab: Vocabulary, a: str, max_len: int) -> EncodedInput:
    """Encode one text as ``[CLS] a ... [SEP]`` plus padding; segments all 0."""
    a_ids = [vocab.id_for(tok) for tok in a.split()]
    if max_len < 2 + min(len(a_ids), 1):
        raise ValueError(f"max_len={max_len} cannot hold [CLS], [SEP], and one token")
    a_ids = a_ids[: max_len - 2]
    ids = [CLS_ID] + a_ids + [SEP_ID]
    return _finish(ids, -1, max_len)


def decode_content(vocab: Vocabulary, enc: EncodedInput) -> list[str]:
    """Tokens of an encoded input, special tokens and padding removed."""
    out = []
    for tid, m in zip(enc.token_ids.tolist(), enc.attention_mask.tolist()):
        if m and tid >= len(SPECIAL_TOKENS):
            out.append(vocab.id_to_token[tid])
    return out
