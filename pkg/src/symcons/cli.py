"""Command-line pipeline: synthesize data, train, evaluate, gradient-check.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Option precedence is command-line flag > config-file value > built-in
default; the resolved configuration is echoed into every output directory.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import gradient_check
from .corpus import (
    DatasetSplit,
    load_jsonl,
    save_jsonl,
    split_dataset,
    synth_non_symmetric,
    synth_single,
    synth_symmetric,
)
from .encoder import ModelConfig, dual_forward_dataset, forward_batch, init_model
from .errors import CheckpointError, DataError, NumericalError
from .evalkit import build_report, extract_disagreements, save_report, write_report_csv
from .objective import LambdaSchedule, OBJECTIVES, combined_loss
from .tokenizer import build_vocab, encode_pair, load_vocab, save_vocab
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DEFAULTS = {
    "synth": {
        "n": 2000,
        "vocab_size": 64,
        "max_words": 6,
        "seed": 0,
        "task": "symmetric",
        "fractions": "0.8,0.1,0.1",
    },
    "train": {
        "task": "symmetric",
        "seeds": "1,2,3,4",
        "objective": "consistency_js",
        "lambda_max": 100.0,
        "epochs": 3,
        "batch": 16,
        "lr": 1e-3,
        "weight_decay": 0.01,
        "head": "clspara",
        "layers": 2,
        "n_heads": 2,
        "d_model": 64,
        "d_ff": 256,
        "max_len": 16,
        "dropout": 0.0,
        "min_count": 1,
    },
    "eval": {
        "task": "symmetric",
        "audit_k": 0,
        "audit_seed": 0,
        "batch": 64,
    },
    "gradcheck": {
        "layers": 2,
        "n_heads": 2,
        "d_model": 8,
        "d_ff": 16,
        "max_len": 12,
        "vocab_size": 24,
        "h": 1e-5,
        "tol": 1e-4,
        "seed": 0,
        "div": "both",
    },
}


def _read_config_file(path: str) -> dict:
    """Flat key-value text; keys mirror flag names (hyphen or underscore)."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, val = line.partition("=")
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'key value' or 'key = value'")
                key, val = parts
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _resolve(args: argparse.Namespace, command: str) -> dict:
    """Merge defaults, config file, and explicit flags, in that order."""
    resolved = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        file_values = _read_config_file(args.config)
        for key, raw in file_values.items():
            if key not in resolved:
                raise DataError(f"unknown config key {key!r} for command {command!r}")
            default = resolved[key]
            if isinstance(default, bool):
                resolved[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                resolved[key] = int(raw)
            elif isinstance(default, float):
                resolved[key] = float(raw)
            else:
                resolved[key] = raw
    for key in resolved:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _echo_config(resolved: dict, out_dir: str, command: str) -> None:
    payload = {"command": command, **resolved}
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated fractions, got {text!r}")
    return parts[0], parts[1], parts[2]


def _parse_seeds(text: str) -> list[int]:
    seeds = [int(x) for x in text.split(",") if x.strip()]
    if not seeds:
        raise ValueError("seeds list must be nonempty")
    return seeds


SYNTH_GENERATORS = {
    "symmetric": synth_symmetric,
    "single": synth_single,
    "non_symmetric": synth_non_symmetric,
}


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "synth")
    generator = SYNTH_GENERATORS[cfg["task"]]
    examples = generator(cfg["n"], cfg["vocab_size"], cfg["max_words"], cfg["seed"])
    split = split_dataset(
        examples, _parse_fractions(cfg["fractions"]), seed=cfg["seed"], name=cfg["task"]
    )
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out, "synth")
    for part_name, part in (
        ("train", split.train),
        ("val", split.validation),
        ("test", split.test),
    ):
        path = os.path.join(args.out, f"{part_name}.jsonl")
        count = save_jsonl(part, path)
        print(f"{path}: {count} examples")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "train")
    seeds = _parse_seeds(cfg["seeds"])
    train_examples = load_jsonl(os.path.join(args.data, "train.jsonl"), cfg["task"])
    val_examples = load_jsonl(os.path.join(args.data, "val.jsonl"), cfg["task"])
    test_examples = load_jsonl(os.path.join(args.data, "test.jsonl"), cfg["task"])
    data = DatasetSplit(
        train=tuple(train_examples),
        validation=tuple(val_examples),
        test=tuple(test_examples),
        name=os.path.basename(os.path.normpath(args.data)),
        task_kind=cfg["task"],
    )
    vocab = build_vocab(train_examples, min_count=cfg["min_count"])
    os.makedirs(args.out, exist_ok=True)
    _echo_config({**cfg, "seeds": ",".join(map(str, seeds))}, args.out, "train")
    save_vocab(vocab, os.path.join(args.out, "vocab.tsv"))
    model_config = ModelConfig(
        layers=cfg["layers"],
        heads=cfg["n_heads"],
        d_model=cfg["d_model"],
        d_ff=cfg["d_ff"],
        max_len=cfg["max_len"],
        vocab_size=len(vocab),
        dropout=cfg["dropout"],
    )
    for seed in seeds:
        tcfg = TrainConfig(
            epochs=cfg["epochs"],
            batch_size=cfg["batch"],
            learning_rate=cfg["lr"],
            weight_decay=cfg["weight_decay"],
            seed=seed,
            objective=cfg["objective"],
            schedule=LambdaSchedule(lambda_max=cfg["lambda_max"], total_steps=0),
            head=cfg["head"],
        )
        model = init_model(model_config, seed=seed)
        model, log = train(model, data, tcfg, vocab)
        seed_dir = os.path.join(args.out, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        ckpt_path = os.path.join(seed_dir, "model.symc")
        save_checkpoint(
            model,
            ckpt_path,
            moments=log.final_moments,
            train_config=tcfg,
            global_step=log.final_step,
        )
        log.write_jsonl(os.path.join(seed_dir, "train_log.jsonl"))
        final_total = log.steps[-1]["total"] if log.steps else float("nan")
        print(f"{ckpt_path}: {log.final_step} steps, final loss {final_total:.4f}")
    return EXIT_OK


def _model_label(objective: str) -> str:
    return objective


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "eval")
    paths: list[str] = []
    for pattern in args.checkpoints:
        matched = sorted(glob.glob(pattern))
        paths.extend(matched if matched else [pattern])
    if not paths:
        raise CheckpointError("no checkpoints given")
    examples = load_jsonl(args.dataset, cfg["task"])
    gold = {ex.example_id: ex.label for ex in examples}
    vocab_path = args.vocab or os.path.join(
        os.path.dirname(os.path.dirname(paths[0])), "vocab.tsv"
    )
    vocab = load_vocab(vocab_path)
    model_runs: dict[str, dict[int, list]] = {}
    for path in paths:
        ckpt = load_checkpoint(path)
        if ckpt.train_config is None:
            raise CheckpointError(f"{path}: checkpoint carries no training config")
        label = _model_label(ckpt.train_config.objective)
        seed = ckpt.train_config.seed
        outputs = dual_forward_dataset(ckpt.model, examples, vocab, batch_size=cfg["batch"])
        model_runs.setdefault(label, {})[seed] = outputs
    baseline = "baseline" if "baseline" in model_runs else sorted(model_runs)[0]
    report = build_report(
        model_runs, gold, dataset_name=os.path.basename(args.dataset), baseline=baseline
    )
    if cfg["audit_k"] > 0:
        report["disagreements"] = {
            name: extract_disagreements(
                runs, cfg["audit_k"], pairs=examples, seed=cfg["audit_seed"]
            )
            for name, runs in model_runs.items()
        }
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out, "eval")
    json_path = os.path.join(args.out, "report.json")
    csv_path = os.path.join(args.out, "report.csv")
    save_report(report, json_path)
    write_report_csv(report, csv_path)
    print(f"{json_path}")
    print(f"{csv_path}")
    for name in sorted(report["models"]):
        cells = report["models"][name]["cells"]
        print(
            f"{name}: consistency {cells['prediction_consistency']}, "
            f"confidence {cells['confidence_consistency']}, "
            f"accuracy {report['models'][name]['accuracy']:.1f}"
        )
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "gradcheck")
    model_config = ModelConfig(
        layers=cfg["layers"],
        heads=cfg["n_heads"],
        d_model=cfg["d_model"],
        d_ff=cfg["d_ff"],
        max_len=cfg["max_len"],
        vocab_size=cfg["vocab_size"],
    )
    model = init_model(model_config, seed=cfg["seed"])
    examples = synth_symmetric(2, 16, 4, seed=cfg["seed"])
    vocab = build_vocab(examples, min_count=1)
    if len(vocab) > model_config.vocab_size:
        raise DataError("gradcheck vocabulary exceeds the model's embedding table")
    enc_l2r = [
        encode_pair(vocab, ex.text_a, ex.text_b, True, model_config.max_len)
        for ex in examples
    ]
    enc_r2l = [
        encode_pair(vocab, ex.text_b, ex.text_a, True, model_config.max_len)
        for ex in examples
    ]
    ids = np.stack([e.token_ids for e in enc_l2r])
    mask = np.stack([e.attention_mask for e in enc_l2r])
    rev_ids = np.stack([e.token_ids for e in enc_r2l])
    rev_mask = np.stack([e.attention_mask for e in enc_r2l])
    targets = np.array([ex.label for ex in examples])

    divergences = ("kl", "js") if cfg["div"] == "both" else (cfg["div"],)
    failed = False
    for div in divergences:

        def loss_fn(div=div):
            p = ad.softmax(forward_batch(model, ids, mask, "clspara"), axis=-1)
            q = ad.softmax(forward_batch(model, rev_ids, rev_mask, "clspara"), axis=-1)
            node = combined_loss(targets, p, q, lam=7.5, div=div).node
            if args.corrupt and ad.tape_active():
                # inflate only the recorded pass: analytic gradients come out
                # 1.01x the true ones while finite differences see the truth
                node = ad.scale(node, 1.01)
            return node

        report = gradient_check(
            f=loss_fn,
            params=model.parameters(),
            h=cfg["h"],
            tol=cfg["tol"],
            max_coords_per_tensor=8,
        )
        status = "pass" if report.passed else "FAIL"
        print(
            f"gradcheck[{div}]: {status}, max rel err {report.max_rel_err:.3e} "
            f"over {report.n_coords} coordinates (tol {report.tol:g})"
        )
        failed = failed or not report.passed
    if args.corrupt:
        # the corrupt flag exists to prove the check can fail
        return EXIT_OK if failed else EXIT_NUMERICAL
    return EXIT_NUMERICAL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symcons",
        description="Consistency-trained symmetric pair classification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n", type=int)
    p_synth.add_argument("--vocab-size", dest="vocab_size", type=int)
    p_synth.add_argument("--max-words", dest="max_words", type=int)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--task", choices=sorted(SYNTH_GENERATORS))
    p_synth.add_argument("--fractions")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="fine-tune models, one checkpoint per seed")
    p_train.add_argument("--config")
    p_train.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--task", choices=("symmetric", "single", "non_symmetric"))
    p_train.add_argument("--seeds", help="comma-separated seed list")
    p_train.add_argument("--objective", choices=OBJECTIVES)
    p_train.add_argument("--lambda-max", dest="lambda_max", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float)
    p_train.add_argument("--head", choices=("clspara", "cls"))
    p_train.add_argument("--layers", type=int)
    p_train.add_argument("--n-heads", dest="n_heads", type=int)
    p_train.add_argument("--d-model", dest="d_model", type=int)
    p_train.add_argument("--d-ff", dest="d_ff", type=int)
    p_train.add_argument("--max-len", dest="max_len", type=int)
    p_train.add_argument("--dropout", type=float)
    p_train.add_argument("--min-count", dest="min_count", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="dual-pass evaluation and reports")
    p_eval.add_argument("--config")
    p_eval.add_argument("--dataset", required=True, help="test split JSONL file")
    p_eval.add_argument("--checkpoints", nargs="+", required=True)
    p_eval.add_argument("--vocab")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--task", choices=("symmetric",))
    p_eval.add_argument("--audit-k", dest="audit_k", type=int)
    p_eval.add_argument("--audit-seed", dest="audit_seed", type=int)
    p_eval.add_argument("--batch", type=int)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p_grad.add_argument("--config")
    p_grad.add_argument("--layers", type=int)
    p_grad.add_argument("--n-heads", dest="n_heads", type=int)
    p_grad.add_argument("--d-model", dest="d_model", type=int)
    p_grad.add_argument("--d-ff", dest="d_ff", type=int)
    p_grad.add_argument("--max-len", dest="max_len", type=int)
    p_grad.add_argument("--vocab-size", dest="vocab_size", type=int)
    p_grad.add_argument("--h", type=float)
    p_grad.add_argument("--tol", type=float)
    p_grad.add_argument("--seed", type=int)
    p_grad.add_argument("--div", choices=("kl", "js", "both"))
    p_grad.add_argument("--corrupt", action="store_true", default=False)
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
