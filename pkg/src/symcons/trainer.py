"""Deterministic fine-tuning: dual forward passes, reverse-augmented data,
consistency-weight annealing, decoupled weight decay, versioned checkpoints.

Baseline and consistency runs consume the same reverse-augmented example
stream under the same seed; only the objective differs. All randomness is
derived from the training seed, so identical configurations reproduce
bit-identical checkpoints.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ComputationTape, Tensor
from .corpus import DatasetSplit, SentencePair, reverse_augment
from .encoder import ModelConfig, ModelState, forward_batch, parameter_shapes
from .errors import CheckpointError, NumericalError
from .objective import (
    LambdaSchedule,
    OBJECTIVES,
    combined_loss,
    cross_entropy,
    lambda_at,
)
from .tokenizer import Vocabulary, encode_pair, encode_single

CHECKPOINT_MAGIC = b"SYMC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 1e-3  # paper-scale models use 2e-5; tiny random-init models need more
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8
    seed: int = 0
    objective: str = "consistency_js"
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    head: str = "clspara"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0.0 <= self.betas[0] < 1.0 and 0.0 <= self.betas[1] < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.head not in ("clspara", "cls"):
            raise ValueError(f"head must be 'clspara' or 'cls', got {self.head!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps_opt": self.eps_opt,
            "seed": self.seed,
            "objective": self.objective,
            "schedule": {
                "lambda_max": self.schedule.lambda_max,
                "total_steps": self.schedule.total_steps,
                "shape": self.schedule.shape,
            },
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        d["schedule"] = LambdaSchedule(**d["schedule"])
        return cls(**d)


@dataclass
class OptimizerMoments:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerMoments":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def decay_applies(name: str) -> bool:
    """Decoupled weight decay skips biases and layer-norm parameters."""
    return not (name.endswith(".bias") or name.endswith(".gain"))


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    moments: OptimizerMoments,
    step: int,
    tcfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay update, in place. ``step`` is 1-based."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    b1, b2 = tcfg.betas
    bias1 = 1.0 - b1**step
    bias2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + tcfg.eps_opt)
        if tcfg.weight_decay != 0.0 and decay_applies(name):
            update = update + tcfg.weight_decay * p.data
        p.data -= tcfg.learning_rate * update


@dataclass
class TrainLog:
    """Per-step records plus the final optimizer state for checkpointing."""

    objective: str
    seed: int
    total_steps: int
    schedule: LambdaSchedule
    steps: list[dict] = field(default_factory=list)
    final_moments: "OptimizerMoments | None" = None
    final_step: int = 0

    def lambdas(self) -> list[float]:
        return [rec["lambda"] for rec in self.steps if "lambda" in rec]

    def epoch_mean(self, key: str, epoch: int) -> float:
        vals = [rec[key] for rec in self.steps if rec["epoch"] == epoch and key in rec]
        return float(np.mean(vals))

    def write_jsonl(self, path, include_timestamp: bool = True) -> None:
        """Header line (the only place a timestamp appears), then step records."""
        header = {
            "objective": self.objective,
            "seed": self.seed,
            "total_steps": self.total_steps,
        }
        if include_timestamp:
            header["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _derived_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _encode_training_pairs(
    examples: Sequence[SentencePair],
    vocab: Vocabulary,
    max_len: int,
    use_clspara: bool,
    both_orders: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pre-encode once; returns (ids, mask, rev_ids, rev_mask, labels)."""
    fwd_ids, fwd_mask, rev_ids, rev_mask = [], [], [], []
    for ex in examples:
        if ex.text_b is None:
            enc = encode_single(vocab, ex.text_a, max_len)
        else:
            enc = encode_pair(vocab, ex.text_a, ex.text_b, use_clspara, max_len)
        fwd_ids.append(enc.token_ids)
        fwd_mask.append(enc.attention_mask)
        if both_orders:
            enc_r = encode_pair(vocab, ex.text_b, ex.text_a, use_clspara, max_len)
            rev_ids.append(enc_r.token_ids)
            rev_mask.append(enc_r.attention_mask)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return (
        np.stack(fwd_ids),
        np.stack(fwd_mask),
        np.stack(rev_ids) if both_orders else np.empty((0, max_len), dtype=np.int64),
        np.stack(rev_mask) if both_orders else np.empty((0, max_len), dtype=np.int64),
        labels,
    )


def train(
    model: ModelState,
    data: DatasetSplit,
    tcfg: TrainConfig,
    vocab: Vocabulary,
) -> tuple[ModelState, TrainLog]:
    """Run the fine-tuning loop; mutates ``model`` in place and returns it.

    Consistency objectives compute both orderings per example and the combined
    loss; the baseline computes plain cross-entropy on the identical stream.
    """
    consistency = tcfg.objective != "baseline"
    if consistency:
        if data.task_kind != "symmetric":
            raise ValueError(
                f"objective {tcfg.objective!r} requires a symmetric task, got {data.task_kind!r}"
            )
        if tcfg.head != "clspara":
            raise ValueError("consistency objectives require head='clspara'")
    if data.task_kind != "symmetric" and tcfg.head == "clspara":
        raise ValueError("head='clspara' is reserved for symmetric tasks")

    examples = (
        reverse_augment(data.train) if data.task_kind == "symmetric" else list(data.train)
    )
    use_clspara = tcfg.head == "clspara"
    ids, mask, rev_ids, rev_mask, labels = _encode_training_pairs(
        examples, vocab, model.config.max_len, use_clspara, both_orders=consistency
    )

    n = len(examples)
    steps_per_epoch = (n + tcfg.batch_size - 1) // tcfg.batch_size
    n_steps = tcfg.epochs * steps_per_epoch
    schedule = tcfg.schedule
    if schedule.total_steps <= 0:
        # anneal across the whole run; the last 0-based step lands exactly on lambda_max
        schedule = replace(schedule, total_steps=max(1, n_steps - 1))
    divergence = "kl" if tcfg.objective == "consistency_kl" else "js"

    moments = OptimizerMoments.zeros_like(model.params)
    log = TrainLog(
        objective=tcfg.objective, seed=tcfg.seed, total_steps=n_steps, schedule=schedule
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0xDA7A]))
    global_step = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            targets = labels[batch]
            model.zero_grad()
            with ComputationTape() as tape:
                logits = forward_batch(
                    model,
                    ids[batch],
                    mask[batch],
                    head=tcfg.head,
                    train_mode=True,
                    dropout_seed=_dropout_seed(tcfg.seed, global_step, 0),
                )
                probs = ad.softmax(logits, axis=-1)
                if consistency:
                    lam = lambda_at(schedule, global_step)
                    logits_rev = forward_batch(
                        model,
                        rev_ids[batch],
                        rev_mask[batch],
                        head=tcfg.head,
                        train_mode=True,
                        dropout_seed=_dropout_seed(tcfg.seed, global_step, 1),
                    )
                    probs_rev = ad.softmax(logits_rev, axis=-1)
                    breakdown = combined_loss(targets, probs, probs_rev, lam, divergence)
                    loss_node = breakdown.node
                    record = {"step": global_step, "epoch": epoch, **breakdown.as_record()}
                else:
                    loss_node = cross_entropy(targets, probs)
                    record = {
                        "step": global_step,
                        "epoch": epoch,
                        "ce": loss_node.item(),
                        "total": loss_node.item(),
                    }
            if not np.isfinite(record["total"]):
                raise NumericalError(f"non-finite loss at step {global_step}")
            tape.backward(loss_node)
            grads = {name: p.grad for name, p in model.params.items()}
            optimizer_step(model.params, grads, moments, global_step + 1, tcfg)
            log.steps.append(record)
            global_step += 1

    model.role = "symmetric_finetuned" if data.task_kind == "symmetric" else "transferred"
    log.final_moments = moments
    log.final_step = global_step
    return model, log


def _dropout_seed(seed: int, step: int, branch: int) -> int:
    # distinct, reproducible stream per (run seed, step, forward branch)
    return int(np.random.SeedSequence([seed, step, branch]).generate_state(1)[0])


def transfer_finetune(
    checkpoint: "Checkpoint",
    data: DatasetSplit,
    tcfg: TrainConfig,
    vocab: Vocabulary,
) -> tuple[ModelState, TrainLog]:
    """Continue training a saved model on a new task through the standard head."""
    if checkpoint.model.role not in ("symmetric_finetuned", "randomly_initialized"):
        raise ValueError(f"cannot transfer from role {checkpoint.model.role!r}")
    if tcfg.head != "cls":
        raise ValueError("transfer fine-tuning uses the standard head: set head='cls'")
    if tcfg.objective != "baseline":
        raise ValueError("transfer fine-tuning uses the plain cross-entropy objective")
    model = checkpoint.model
    model, log = train(model, data, tcfg, vocab)
    model.role = "transferred"
    return model, log


# --- checkpoint serialization ---------------------------------------------
#
# Layout: b"SYMC" | u32 LE format_version | u32 LE manifest length | manifest
# (UTF-8 JSON: configs, role, step, array directory) | raw float64 LE data.


@dataclass
class Checkpoint:
    format_version: int
    model: ModelState
    moments: OptimizerMoments | None
    train_config: TrainConfig | None
    global_step: int


def save_checkpoint(
    state: ModelState,
    path,
    moments: OptimizerMoments | None = None,
    train_config: TrainConfig | None = None,
    global_step: int = 0,
) -> None:
    """Write a bit-exact snapshot of parameters and optimizer moments."""
    arrays: list[tuple[str, str, np.ndarray]] = [
        (name, "param", p.data) for name, p in state.params.items()
    ]
    if moments is not None:
        arrays += [(name, "opt_m", moments.m[name]) for name in state.params]
        arrays += [(name, "opt_v", moments.v[name]) for name in state.params]
    directory = []
    offset = 0
    for name, kind, arr in arrays:
        directory.append(
            {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset}
        )
        offset += arr.size * 8
    manifest = {
        "model_config": state.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "role": state.role,
        "global_step": int(global_step),
        "arrays": directory,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for _, _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; raises CheckpointError on any structural defect."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {version} (expected {CHECKPOINT_VERSION})"
        )
    (manifest_len,) = struct.unpack_from("<I", blob, 8)
    manifest_end = 12 + manifest_len
    if len(blob) < manifest_end:
        raise CheckpointError(f"{path}: unexpected end of checkpoint in manifest")
    try:
        manifest = json.loads(blob[12:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    config = ModelConfig.from_dict(manifest["model_config"])
    expected = parameter_shapes(config)
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    data_start = manifest_end
    for entry in manifest["arrays"]:
        name, kind = entry["name"], entry["kind"]
        shape = tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"{path}: unknown array {name!r}")
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: manifest {shape}, config {expected[name]}"
            )
        size = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        end = start + size * 8
        if end > len(blob):
            raise CheckpointError(f"{path}: unexpected end of checkpoint in array {name!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64).reshape(shape)
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif kind == "opt_m":
            m[name] = arr
        elif kind == "opt_v":
            v[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown array kind {kind!r}")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameter arrays: {sorted(missing)}")
    model = ModelState(config=config, params=params, role=manifest["role"])
    moments = OptimizerMoments(m=m, v=v) if m and v else None
    tcfg = TrainConfig.from_dict(manifest["train_config"]) if manifest["train_config"] else None
    return Checkpoint(
        format_version=version,
        model=model,
        moments=moments,
        train_config=tcfg,
        global_step=manifest["global_step"],
    )
