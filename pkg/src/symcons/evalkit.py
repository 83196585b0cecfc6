"""Consistency and classification metrics, McNemar's paired test, the
disagreement extractor, and machine-readable report assembly.

Conventions: standard deviations across seeds are population (descriptive)
standard deviations; Pearson correlation uses population moments and is
reported as an explicit None sentinel when either confidence sequence has
zero variance; argmax ties resolve to the lower class id throughout.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import SentencePair
from .encoder import DualPassOutput

MCNEMAR_EXACT_LIMIT = 25  # below this many discordant pairs, use the exact binomial


def prediction_consistency(outputs: Sequence[DualPassOutput]) -> float:
    """Percentage of pairs whose two orderings get the same argmax label."""
    if not outputs:
        raise ValueError("prediction_consistency needs at least one output")
    agree = sum(1 for o in outputs if o.label_l2r == o.label_r2l)
    return 100.0 * agree / len(outputs)


def confidence_consistency(
    outputs: Sequence[DualPassOutput],
) -> tuple[float | None, float]:
    """(Pearson x100 or None at zero variance, MSE x1000) of class-1 confidences."""
    if len(outputs) < 2:
        raise ValueError("confidence_consistency needs at least two outputs")
    x = np.array([o.p_l2r[1] for o in outputs])
    y = np.array([o.p_r2l[1] for o in outputs])
    mse_x1000 = 1000.0 * float(np.mean((x - y) ** 2))
    sx = float(np.sqrt(np.mean((x - x.mean()) ** 2)))
    sy = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
    if sx == 0.0 or sy == 0.0:
        return None, mse_x1000
    cov = float(np.mean((x - x.mean()) * (y - y.mean())))
    return 100.0 * cov / (sx * sy), mse_x1000


def classification_metrics(
    predictions: Sequence[int], gold: Sequence[int]
) -> tuple[float, float]:
    """(accuracy, F1) in percent; F1 is binary with positive class 1."""
    if len(predictions) != len(gold):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold labels"
        )
    if len(predictions) == 0:
        raise ValueError("classification_metrics needs at least one example")
    pred = np.asarray(predictions)
    true = np.asarray(gold)
    accuracy = 100.0 * float(np.mean(pred == true))
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 100.0 * 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


@dataclass(frozen=True)
class McNemarResult:
    b: int  # model 1 correct, model 2 wrong
    c: int  # model 1 wrong, model 2 correct
    statistic: float
    p_value: float
    significant_at: dict[float, bool]
    method: str  # "exact" or "chi2"

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "c": self.c,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "significant_at": {str(a): s for a, s in self.significant_at.items()},
            "method": self.method,
        }


def _chi2_sf_1df(x: float) -> float:
    """Survival function of chi-square with one degree of freedom."""
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar_test(
    correct1: Sequence[bool],
    correct2: Sequence[bool],
    alphas: Sequence[float] = (0.01, 0.05),
) -> McNemarResult:
    """Paired-classifier test on the discordant counts.

    With b + c >= 25 a continuity-corrected chi-square statistic is used;
    otherwise the exact two-sided binomial, capped at 1. Zero discordance
    yields p = 1 and statistic 0.
    """
    if len(correct1) != len(correct2):
        raise ValueError(
            f"length mismatch: {len(correct1)} vs {len(correct2)} correctness flags"
        )
    c1 = np.asarray(correct1, dtype=bool)
    c2 = np.asarray(correct2, dtype=bool)
    b = int(np.sum(c1 & ~c2))
    c = int(np.sum(~c1 & c2))
    n = b + c
    statistic = ((abs(b - c) - 1) ** 2) / n if n > 0 else 0.0
    if n == 0:
        p = 1.0
        method = "exact"
    elif n >= MCNEMAR_EXACT_LIMIT:
        p = _chi2_sf_1df(statistic)
        method = "chi2"
    else:
        tail = sum(math.comb(n, k) for k in range(min(b, c) + 1))
        p = min(1.0, 2.0 * tail * 0.5**n)
        method = "exact"
    return McNemarResult(
        b=b,
        c=c,
        statistic=float(statistic),
        p_value=float(p),
        significant_at={float(a): p < a for a in alphas},
        method=method,
    )


def extract_disagreements(
    runs: Mapping[int, Sequence[DualPassOutput]],
    k: int,
    pairs: Sequence[SentencePair] = (),
    seed: int = 0,
) -> list[dict]:
    """Examples whose orderings disagree for a strict majority of seeds.

    Returns up to ``k`` qualifying examples, sampled deterministically, each
    with texts (when ``pairs`` supplies them), per-seed labels, and class-1
    confidences, ready for manual error typing.
    """
    if not runs:
        raise ValueError("extract_disagreements needs at least one seed")
    seeds = sorted(runs)
    id_lists = [[o.example_id for o in runs[s]] for s in seeds]
    if any(ids != id_lists[0] for ids in id_lists[1:]):
        raise ValueError("example_ids are not aligned across seeds")
    by_id = {ex.example_id: ex for ex in pairs}
    majority = len(seeds) / 2.0
    qualifying: list[str] = []
    for idx, example_id in enumerate(id_lists[0]):
        flips = sum(
            1 for s in seeds if runs[s][idx].label_l2r != runs[s][idx].label_r2l
        )
        if flips > majority:
            qualifying.append(example_id)
    if len(qualifying) > k:
        rng = np.random.default_rng(seed)
        chosen_idx = sorted(rng.choice(len(qualifying), size=k, replace=False).tolist())
        qualifying = [qualifying[i] for i in chosen_idx]
    index_of = {eid: i for i, eid in enumerate(id_lists[0])}
    records = []
    for example_id in qualifying:
        idx = index_of[example_id]
        ex = by_id.get(example_id)
        records.append(
            {
                "example_id": example_id,
                "text_a": ex.text_a if ex else None,
                "text_b": ex.text_b if ex else None,
                "gold_label": ex.label if ex else None,
                "per_seed": {
                    str(s): {
                        "label_l2r": runs[s][idx].label_l2r,
                        "label_r2l": runs[s][idx].label_r2l,
                        "conf_l2r": float(runs[s][idx].p_l2r[1]),
                        "conf_r2l": float(runs[s][idx].p_r2l[1]),
                    }
                    for s in seeds
                },
            }
        )
    return records


@dataclass(frozen=True)
class ConsistencyReport:
    """Aggregate metrics for one (model, dataset) cell across seeds."""

    model: str
    dataset: str
    prediction_consistency: float  # mean over seeds
    prediction_consistency_std: float
    pearson_x100: float | None  # pooled over (seed, example) confidences
    mse_x1000: float
    accuracy: float  # mean over seeds, L2R predictions vs gold
    accuracy_std: float
    f1: float
    f1_std: float
    n_examples: int
    per_seed: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.prediction_consistency <= 100.0:
            raise ValueError("prediction consistency must be a percentage")
        if self.pearson_x100 is not None and not -100.0 <= self.pearson_x100 <= 100.0 + 1e-9:
            raise ValueError("pearson_x100 out of range")
        if self.mse_x1000 < 0:
            raise ValueError("mse_x1000 must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "prediction_consistency": self.prediction_consistency,
            "prediction_consistency_std": self.prediction_consistency_std,
            "pearson_x100": self.pearson_x100,
            "mse_x1000": self.mse_x1000,
            "accuracy": self.accuracy,
            "accuracy_std": self.accuracy_std,
            "f1": self.f1,
            "f1_std": self.f1_std,
            "n_examples": self.n_examples,
            "per_seed": self.per_seed,
            "cells": {
                "prediction_consistency": format_mean_std(
                    self.prediction_consistency, self.prediction_consistency_std
                ),
                "confidence_consistency": format_pearson_mse(
                    self.pearson_x100, self.mse_x1000
                ),
            },
        }


def format_mean_std(mean: float, std: float) -> str:
    """Render a table cell like "96.6 ± 0.15"."""
    return f"{mean:.1f} ± {std:.2f}"


def format_pearson_mse(pearson_x100: float | None, mse_x1000: float) -> str:
    """Render a confidence cell like "98.2 [5.89]"."""
    head = "undefined" if pearson_x100 is None else f"{pearson_x100:.1f}"
    return f"{head} [{mse_x1000:.3g}]"


def _pop_std(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((arr - arr.mean()) ** 2)))


def _pooled_outputs(
    runs: Mapping[int, Sequence[DualPassOutput]]
) -> list[DualPassOutput]:
    pooled: list[DualPassOutput] = []
    for s in sorted(runs):
        pooled.extend(runs[s])
    return pooled


def summarize_model(
    model_name: str,
    dataset_name: str,
    runs: Mapping[int, Sequence[DualPassOutput]],
    gold: Mapping[str, int],
) -> ConsistencyReport:
    """Per-seed metrics plus pooled confidence consistency for one model."""
    if not runs:
        raise ValueError("summarize_model needs at least one seed")
    per_seed = []
    pc_vals, acc_vals, f1_vals = [], [], []
    for s in sorted(runs):
        outputs = runs[s]
        pc = prediction_consistency(outputs)
        pearson, mse = confidence_consistency(outputs)
        preds = [o.label_l2r for o in outputs]
        labels = [gold[o.example_id] for o in outputs]
        acc, f1 = classification_metrics(preds, labels)
        pc_vals.append(pc)
        acc_vals.append(acc)
        f1_vals.append(f1)
        per_seed.append(
            {
                "seed": s,
                "prediction_consistency": pc,
                "pearson_x100": pearson,
                "mse_x1000": mse,
                "accuracy": acc,
                "f1": f1,
            }
        )
    pooled = _pooled_outputs(runs)
    pearson_pooled, mse_pooled = confidence_consistency(pooled)
    return ConsistencyReport(
        model=model_name,
        dataset=dataset_name,
        prediction_consistency=float(np.mean(pc_vals)),
        prediction_consistency_std=_pop_std(pc_vals),
        pearson_x100=pearson_pooled,
        mse_x1000=mse_pooled,
        accuracy=float(np.mean(acc_vals)),
        accuracy_std=_pop_std(acc_vals),
        f1=float(np.mean(f1_vals)),
        f1_std=_pop_std(f1_vals),
        n_examples=len(runs[sorted(runs)[0]]),
        per_seed=per_seed,
    )


def build_report(
    model_runs: Mapping[str, Mapping[int, Sequence[DualPassOutput]]],
    gold: Mapping[str, int],
    dataset_name: str,
    baseline: str = "baseline",
) -> dict:
    """Assemble the full comparison report across models.

    McNemar compares each model's gold-correctness vector (L2R predictions,
    pooled over seeds paired by seed rank) against the baseline's. A second,
    gold-free McNemar on the per-example order-agreement indicators is also
    reported, since that is what the consistency improvement itself claims.
    """
    if baseline not in model_runs:
        raise ValueError(f"baseline model {baseline!r} missing from runs")
    reports = {
        name: summarize_model(name, dataset_name, runs, gold)
        for name, runs in model_runs.items()
    }
    comparisons: dict[str, dict] = {}
    base_runs = model_runs[baseline]
    for name, runs in model_runs.items():
        if name == baseline:
            continue
        base_correct, model_correct = [], []
        base_agree, model_agree = [], []
        for sb, sm in zip(sorted(base_runs), sorted(runs)):
            b_out, m_out = base_runs[sb], runs[sm]
            if [o.example_id for o in b_out] != [o.example_id for o in m_out]:
                raise ValueError("example_ids are not aligned between models")
            base_correct += [o.label_l2r == gold[o.example_id] for o in b_out]
            model_correct += [o.label_l2r == gold[o.example_id] for o in m_out]
            base_agree += [o.label_l2r == o.label_r2l for o in b_out]
            model_agree += [o.label_l2r == o.label_r2l for o in m_out]
        comparisons[name] = {
            "vs": baseline,
            "mcnemar_correctness": mcnemar_test(base_correct, model_correct).to_dict(),
            "mcnemar_consistency": mcnemar_test(base_agree, model_agree).to_dict(),
        }
    return {
        "dataset": dataset_name,
        "conventions": {
            "stddev": "population, across seeds",
            "pearson": "population moments, pooled over (seed, example); None at zero variance",
            "accuracy_predictions": "L2R order vs gold",
            "mcnemar": "pooled gold-correctness; consistency variant also reported",
        },
        "models": {name: rep.to_dict() for name, rep in reports.items()},
        "comparisons": comparisons,
    }


def save_report(report: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: str | os.PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


CSV_COLUMNS = (
    "model",
    "dataset",
    "pred_consistency_mean",
    "pred_consistency_std",
    "pearson_x100",
    "mse_x1000",
    "accuracy",
    "f1",
    "mcnemar_p",
)


def write_report_csv(report: dict, path: str | os.PathLike) -> None:
    """One row per model; mcnemar_p is empty for the baseline row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for name in sorted(report["models"]):
            rep = report["models"][name]
            comparison = report["comparisons"].get(name)
            writer.writerow(
                [
                    name,
                    rep["dataset"],
                    rep["prediction_consistency"],
                    rep["prediction_consistency_std"],
                    "" if rep["pearson_x100"] is None else rep["pearson_x100"],
                    rep["mse_x1000"],
                    rep["accuracy"],
                    rep["f1"],
                    comparison["mcnemar_correctness"]["p_value"] if comparison else "",
                ]
            )
