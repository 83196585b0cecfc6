"""Dataset handling: JSONL ingestion, synthetic task generation, reverse
augmentation, and deterministic splits.

Synthetic sentences are sequences of integer-coded words rendered as strings
("w17"). Words come in two-member synonym classes (w2i and w2i+1 are
interchangeable), which makes every labeling rule exactly checkable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

TASK_KINDS = ("symmetric", "single", "non_symmetric")


@dataclass(frozen=True)
class SentencePair:
    """One labeled example; ``text_b`` is None exactly for single-input tasks."""

    text_a: str
    text_b: str | None
    label: int
    task_kind: str
    example_id: str

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task_kind {self.task_kind!r}")
        if (self.text_b is None) != (self.task_kind == "single"):
            raise ValueError(
                "text_b must be present iff task_kind != 'single' "
                f"(task_kind={self.task_kind!r}, text_b={self.text_b!r})"
            )

    def swapped(self, id_suffix: str = ":rev") -> "SentencePair":
        if self.text_b is None:
            raise ValueError("cannot swap a single-input example")
        return SentencePair(
            text_a=self.text_b,
            text_b=self.text_a,
            label=self.label,
            task_kind=self.task_kind,
            example_id=self.example_id + id_suffix,
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Train/validation/test partition of one task's examples."""

    train: tuple[SentencePair, ...]
    validation: tuple[SentencePair, ...]
    test: tuple[SentencePair, ...]
    name: str
    task_kind: str

    def __post_init__(self) -> None:
        ids: set[str] = set()
        for part in (self.train, self.validation, self.test):
            for ex in part:
                if ex.task_kind != self.task_kind:
                    raise ValueError(
                        f"example {ex.example_id!r} has task_kind {ex.task_kind!r}, "
                        f"split expects {self.task_kind!r}"
                    )
                if ex.example_id in ids:
                    raise ValueError(f"duplicate example_id {ex.example_id!r} across splits")
                ids.add(ex.example_id)


def load_jsonl(path: str | os.PathLike, task_kind: str) -> list[SentencePair]:
    """Read one example per line; fields text_a, text_b (null for single), label.

    Missing example_id fields are assigned "<filename>:<line-number>".
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task_kind {task_kind!r}")
    filename = os.path.basename(os.fspath(path))
    examples: list[SentencePair] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed record at line {lineno}: {exc.msg}") from exc
            if not isinstance(record, dict) or "text_a" not in record or "label" not in record:
                raise DataError(f"malformed record at line {lineno}: missing text_a/label")
            label = record["label"]
            if label not in (0, 1):
                raise DataError(f"invalid label at line {lineno}: {label!r}")
            text_b = record.get("text_b")
            if task_kind != "single" and text_b is None:
                raise DataError(f"missing text_b at line {lineno} for pair task")
            if task_kind == "single":
                text_b = None
            example_id = record.get("example_id") or f"{filename}:{lineno}"
            if example_id in seen_ids:
                raise DataError(f"duplicate example_id {example_id!r} at line {lineno}")
            seen_ids.add(example_id)
            examples.append(
                SentencePair(
                    text_a=str(record["text_a"]),
                    text_b=None if text_b is None else str(text_b),
                    label=int(label),
                    task_kind=task_kind,
                    example_id=example_id,
                )
            )
    return examples


def save_jsonl(examples: Iterable[SentencePair], path: str | os.PathLike) -> int:
    """Write examples one JSON record per line; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {
                "text_a": ex.text_a,
                "text_b": ex.text_b,
                "label": ex.label,
                "example_id": ex.example_id,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def reverse_augment(examples: Sequence[SentencePair]) -> list[SentencePair]:
    """Append a swapped copy of every pair: originals first, then the swaps.

    Only valid for symmetric tasks, where the label is order-invariant.
    """
    for ex in examples:
        if ex.task_kind != "symmetric":
            raise ValueError(
                f"reverse_augment requires symmetric examples, got {ex.task_kind!r} "
                f"for {ex.example_id!r}"
            )
    return list(examples) + [ex.swapped() for ex in examples]


def split_dataset(
    examples: Sequence[SentencePair],
    fractions: tuple[float, float, float],
    seed: int,
    name: str = "",
) -> DatasetSplit:
    """Deterministic seeded shuffle and partition.

    Validation/test sizes are floor-rounded; the remainder goes to train so
    their sizes are exactly predictable.
    """
    if len(examples) < 3:
        raise ValueError(f"need at least 3 examples to split, got {len(examples)}")
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) <= 0:
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    kinds = {ex.task_kind for ex in examples}
    if len(kinds) != 1:
        raise ValueError(f"examples mix task kinds: {sorted(kinds)}")
    n = len(examples)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [examples[i] for i in order]
    n_val = int(f_val * n)
    n_test = int(f_test * n)
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
        name=name,
        task_kind=kinds.pop(),
    )


# --- synthetic tasks -------------------------------------------------------
#
# Word "w{j}" belongs to synonym class j // 2; each class has two members.
# The pair-task label is a pure function of the two class multisets, so it is
# symmetric under swapping by construction.


def word_class(token: str) -> int:
    if not token.startswith("w"):
        raise ValueError(f"not a synthetic token: {token!r}")
    return int(token[1:]) // 2


def _classes(text: str) -> list[int]:
    return [word_class(tok) for tok in text.split()]


def synthetic_pair_label(text_a: str, text_b: str) -> int:
    """Labeling rule of the symmetric task: 1 iff class multisets match."""
    return int(sorted(_classes(text_a)) == sorted(_classes(text_b)))


def synthetic_single_label(text: str) -> int:
    """Single-input rule: 1 iff even-numbered classes outnumber odd ones."""
    classes = _classes(text)
    even = sum(1 for c in classes if c % 2 == 0)
    return int(even > len(classes) - even)


def synthetic_entailment_label(text_a: str, text_b: str) -> int:
    """Non-symmetric rule: 1 iff every class of text_a also occurs in text_b."""
    return int(set(_classes(text_a)) <= set(_classes(text_b)))


def _render(rng: np.random.Generator, classes: Sequence[int]) -> str:
    # pick one of the two synonyms per class slot
    return " ".join(f"w{2 * c + int(rng.integers(0, 2))}" for c in classes)


def _bounded_swap(rng: np.random.Generator, items: list, p_swap: float) -> list:
    # at most one adjacent transposition, so paraphrases stay near-aligned
    out = list(items)
    if len(out) >= 2 and rng.random() < p_swap:
        i = int(rng.integers(0, len(out) - 1))
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


SWAP_PROB = 0.25  # share of pairs with one adjacent transposition in text_b
SYNONYM_SUB_PROB = 0.15  # per surviving slot, chance text_b uses the other synonym
HARD_NEGATIVE_PROB = 0.5  # share of negatives changing only a single class
EASY_NEGATIVE_PROB = 0.5  # share of negatives drawing replacements from the spare pool


def synth_symmetric(n: int, vocab_size: int, max_len: int, seed: int) -> list[SentencePair]:
    """Generate a balanced paraphrase-detection task.

    Positives share the class multiset (per-slot synonym substitution plus a
    bounded adjacent transposition); negatives replace one or two classes.
    Replacement classes come either from a reserved pool that paraphrase pairs
    never use (lexically detectable) or from the content pool (detectable only
    by comparing the segments), giving the task a graded difficulty profile.
    Sentences have a fixed token count of min(4, max_len, content classes - 2)
    so the two segments stay positionally comparable for small encoders.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if vocab_size < 8:
        raise ValueError(f"vocab_size must be >= 8, got {vocab_size}")
    if max_len < 4:
        raise ValueError(f"max_len must be >= 4, got {max_len}")
    rng = np.random.default_rng(seed)
    n_classes = vocab_size // 2
    n_reserved = max(1, n_classes // 4)
    content = list(range(n_classes - n_reserved))
    reserved = list(range(n_classes - n_reserved, n_classes))
    length = min(4, max_len, len(content) - 1)
    examples: list[SentencePair] = []
    for i in range(n):
        label = 1 if i % 2 == 0 else 0
        classes = [content[j] for j in rng.choice(len(content), size=length, replace=False)]
        a_choice = [int(rng.integers(0, 2)) for _ in classes]
        if label == 1:
            b_classes = list(classes)
        else:
            if rng.random() < EASY_NEGATIVE_PROB:
                pool = reserved
            else:
                pool = [c for c in content if c not in classes]
            k = 1 if rng.random() < HARD_NEGATIVE_PROB else 2
            k = min(k, len(pool), length)
            replacements = rng.choice(len(pool), size=k, replace=False)
            positions = rng.choice(length, size=k, replace=False)
            b_classes = list(classes)
            for pos, rep in zip(positions, replacements):
                b_classes[pos] = pool[rep]
        b_tokens = []
        for j, c in enumerate(b_classes):
            if c == classes[j]:
                flip = 1 if rng.random() < SYNONYM_SUB_PROB else 0
                b_tokens.append(f"w{2 * c + (a_choice[j] ^ flip)}")
            else:
                b_tokens.append(f"w{2 * c + int(rng.integers(0, 2))}")
        b_tokens = _bounded_swap(rng, b_tokens, SWAP_PROB)
        examples.append(
            SentencePair(
                text_a=" ".join(f"w{2 * c + s}" for c, s in zip(classes, a_choice)),
                text_b=" ".join(b_tokens),
                label=label,
                task_kind="symmetric",
                example_id=f"synth:{i}",
            )
        )
    return examples


def synth_single(n: int, vocab_size: int, max_len: int, seed: int) -> list[SentencePair]:
    """Generate a balanced single-sentence task (even/odd lexicon majority)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if vocab_size < 8:
        raise ValueError(f"vocab_size must be >= 8, got {vocab_size}")
    if max_len < 4:
        raise ValueError(f"max_len must be >= 4, got {max_len}")
    rng = np.random.default_rng(seed)
    n_classes = vocab_size // 2
    even_pool = [c for c in range(n_classes) if c % 2 == 0]
    odd_pool = [c for c in range(n_classes) if c % 2 == 1]
    hi = min(max_len, 2 * min(len(even_pool), len(odd_pool)) - 1)
    lo = min(3, hi)
    examples: list[SentencePair] = []
    for i in range(n):
        label = 1 if i % 2 == 0 else 0
        length = int(rng.integers(lo, hi + 1))
        majority = length // 2 + 1
        big, small = (even_pool, odd_pool) if label == 1 else (odd_pool, even_pool)
        classes = [big[j] for j in rng.choice(len(big), size=majority, replace=False)]
        classes += [small[j] for j in rng.choice(len(small), size=length - majority, replace=False)]
        classes = [classes[j] for j in rng.permutation(length)]
        examples.append(
            SentencePair(
                text_a=_render(rng, classes),
                text_b=None,
                label=label,
                task_kind="single",
                example_id=f"synth-single:{i}",
            )
        )
    return examples


def synth_non_symmetric(n: int, vocab_size: int, max_len: int, seed: int) -> list[SentencePair]:
    """Generate a balanced order-sensitive task: does text_b cover text_a's classes."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if vocab_size < 8:
        raise ValueError(f"vocab_size must be >= 8, got {vocab_size}")
    if max_len < 4:
        raise ValueError(f"max_len must be >= 4, got {max_len}")
    rng = np.random.default_rng(seed)
    n_classes = vocab_size // 2
    hi_b = min(max_len, n_classes - 2)
    examples: list[SentencePair] = []
    for i in range(n):
        label = 1 if i % 2 == 0 else 0
        len_b = int(rng.integers(3, hi_b + 1))
        b_classes = rng.choice(n_classes, size=len_b, replace=False).tolist()
        len_a = int(rng.integers(2, len_b))
        picked = rng.choice(len_b, size=len_a, replace=False)
        a_classes = [b_classes[j] for j in picked]
        if label == 0:
            spare = [c for c in range(n_classes) if c not in b_classes]
            a_classes[int(rng.integers(0, len_a))] = spare[int(rng.integers(0, len(spare)))]
        examples.append(
            SentencePair(
                text_a=_render(rng, a_classes),
                text_b=_render(rng, b_classes),
                label=label,
                task_kind="non_symmetric",
                example_id=f"synth-entail:{i}",
            )
        )
    return examples
