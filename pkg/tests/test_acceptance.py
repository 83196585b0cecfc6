"""Acceptance suite.

Each numbered test prints one PASS/FAIL line (run with -s to see them all).
The directional-reproduction experiment (criteria 3, 4, 7, 8) trains
4 seeds x {baseline, consistency_kl, consistency_js} on the synthetic
symmetric task and is shared through a module-scoped fixture.
"""

import json
import math
import time
from dataclasses import dataclass

import numpy as np
import numpy.testing as npt
import pytest
import scipy.stats

import symcons as sc
from symcons import autodiff as ad
from symcons.cli import main as cli_main
from symcons.encoder import forward_batch
from symcons.evalkit import confidence_consistency, mcnemar_test
from symcons.objective import combined_loss
from symcons.tokenizer import encode_pair, encode_single


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: metric/divergence oracle equivalence
# ---------------------------------------------------------------------------


def _oracle_cross_entropy(target, probs, eps=1e-7):
    return -math.log(min(max(probs[target], eps), 1.0))


def _oracle_kl(p, q, eps=1e-7):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > eps:
            total += pi * math.log(min(max(pi, eps), 1.0) / min(max(qi, eps), 1.0))
    return total


def _oracle_js(p, q, eps=1e-7):
    m = [(pi + qi) / 2 for pi, qi in zip(p, q)]
    return 0.5 * _oracle_kl(p, m, eps) + 0.5 * _oracle_kl(q, m, eps)


def _oracle_accuracy_f1(pred, gold):
    n = len(pred)
    acc = 100.0 * sum(p == g for p, g in zip(pred, gold)) / n
    tp = sum(1 for p, g in zip(pred, gold) if p == 1 and g == 1)
    fp = sum(1 for p, g in zip(pred, gold) if p == 1 and g == 0)
    fn = sum(1 for p, g in zip(pred, gold) if p == 0 and g == 1)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 100.0 * 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, f1


def _oracle_mcnemar_p(b, c):
    n = b + c
    if n == 0:
        return 1.0
    if n >= 25:
        stat = (abs(b - c) - 1) ** 2 / n
        return float(scipy.stats.chi2.sf(stat, df=1))
    return min(1.0, 2.0 * sum(math.comb(n, k) for k in range(min(b, c) + 1)) * 0.5**n)


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.time()
    worst = 0.0

    for _ in range(1000):
        k = int(rng.integers(2, 6))
        p = rng.random(k) + 1e-4
        p /= p.sum()
        q = rng.random(k) + 1e-4
        q /= q.sum()
        target = int(rng.integers(0, k))
        worst = max(worst, abs(sc.cross_entropy(target, p) - _oracle_cross_entropy(target, p.tolist())))
        worst = max(worst, abs(sc.kl_divergence(p, q) - _oracle_kl(p.tolist(), q.tolist())))
        worst = max(worst, abs(sc.js_divergence(p, q) - _oracle_js(p.tolist(), q.tolist())))

    for _ in range(1000):
        n = int(rng.integers(3, 30))
        x = rng.random(n)
        y = np.clip(x + rng.normal(0, 0.2, n), 0.0, 1.0)
        outs = []
        for i in range(n):
            pv = np.array([1 - x[i], x[i]])
            qv = np.array([1 - y[i], y[i]])
            outs.append(sc.DualPassOutput(pv, qv, int(np.argmax(pv)), int(np.argmax(qv)), f"e{i}"))
        pearson, mse = confidence_consistency(outs)
        worst = max(worst, abs(mse - 1000.0 * float(np.mean((x - y) ** 2))))
        if pearson is not None:
            expected = 100.0 * scipy.stats.pearsonr(x, y).statistic
            worst = max(worst, abs(pearson - expected))
        pred = rng.integers(0, 2, n).tolist()
        gold = rng.integers(0, 2, n).tolist()
        acc, f1 = sc.classification_metrics(pred, gold)
        exp_acc, exp_f1 = _oracle_accuracy_f1(pred, gold)
        worst = max(worst, abs(acc - exp_acc), abs(f1 - exp_f1))

    worst_p = 0.0
    for _ in range(1000):
        b = int(rng.integers(0, 40))
        c = int(rng.integers(0, 40))
        flags1 = [True] * b + [False] * c + [True] * 3
        flags2 = [False] * b + [True] * c + [True] * 3
        result = mcnemar_test(flags1, flags2)
        worst_p = max(worst_p, abs(result.p_value - _oracle_mcnemar_p(b, c)))

    elapsed = time.time() - t0
    ok = worst < 1e-9 and worst_p < 1e-6 and elapsed < 60
    report("1", ok, f"max metric err {worst:.2e} (tol 1e-9), "
                    f"max p err {worst_p:.2e} (tol 1e-6), {elapsed:.1f}s (< 60s)")
    assert worst < 1e-9
    assert worst_p < 1e-6
    assert elapsed < 60


# ---------------------------------------------------------------------------
# criterion 2: gradient correctness of the full combined loss
# ---------------------------------------------------------------------------


def test_criterion_2_gradient_correctness():
    t0 = time.time()
    config = sc.ModelConfig(layers=2, heads=2, d_model=8, d_ff=16, max_len=12, vocab_size=24)
    model = sc.init_model(config, seed=7)
    examples = sc.synth_symmetric(2, 16, 4, seed=7)
    vocab = sc.build_vocab(examples)
    enc_l = [encode_pair(vocab, e.text_a, e.text_b, True, config.max_len) for e in examples]
    enc_r = [encode_pair(vocab, e.text_b, e.text_a, True, config.max_len) for e in examples]
    ids = np.stack([e.token_ids for e in enc_l])
    mask = np.stack([e.attention_mask for e in enc_l])
    rids = np.stack([e.token_ids for e in enc_r])
    rmask = np.stack([e.attention_mask for e in enc_r])
    targets = np.array([e.label for e in examples])

    worst = {}
    for div in ("kl", "js"):

        def loss(div=div):
            p = ad.softmax(forward_batch(model, ids, mask, "clspara"), axis=-1)
            q = ad.softmax(forward_batch(model, rids, rmask, "clspara"), axis=-1)
            return combined_loss(targets, p, q, lam=7.5, div=div).node

        result = ad.gradient_check(loss, model.parameters(), h=1e-5, tol=1e-4,
                                   max_coords_per_tensor=10)
        worst[div] = result.max_rel_err

    elapsed = time.time() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    report("2", ok, f"max rel err kl={worst['kl']:.2e}, js={worst['js']:.2e} "
                    f"(tol 1e-4), {elapsed:.1f}s (< 60s)")
    assert worst["kl"] < 1e-4
    assert worst["js"] < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------------------
# criteria 3, 4, 7, 8: the directional-reproduction experiment
# ---------------------------------------------------------------------------

SEEDS = (1, 2, 3, 4)
OBJECTIVES = ("baseline", "consistency_kl", "consistency_js")
EPOCHS = 6


@dataclass
class Experiment:
    split: sc.DatasetSplit
    vocab: sc.Vocabulary
    config: sc.ModelConfig
    runs: dict  # objective -> seed -> list[DualPassOutput]
    logs: dict  # objective -> seed -> TrainLog
    models: dict  # objective -> seed -> ModelState
    gold: dict
    train_seconds: float


@pytest.fixture(scope="module")
def experiment():
    examples = sc.synth_symmetric(2500, 64, 6, seed=11)
    split = sc.split_dataset(examples, (0.8, 0.04, 0.16), seed=11, name="synthetic-paraphrase")
    assert (len(split.train), len(split.test)) == (2000, 400)
    vocab = sc.build_vocab(split.train, min_count=1)
    config = sc.ModelConfig(layers=2, heads=2, d_model=64, d_ff=256, max_len=16,
                            vocab_size=len(vocab))
    runs, logs, models = {}, {}, {}
    t0 = time.time()
    for objective in OBJECTIVES:
        runs[objective], logs[objective], models[objective] = {}, {}, {}
        for seed in SEEDS:
            tcfg = sc.TrainConfig(epochs=EPOCHS, batch_size=32, learning_rate=1e-3,
                                  seed=seed, objective=objective)
            model = sc.init_model(config, seed=seed)
            model, log = sc.train(model, split, tcfg, vocab)
            runs[objective][seed] = sc.dual_forward_dataset(model, split.test, vocab)
            logs[objective][seed] = log
            models[objective][seed] = model
    train_seconds = time.time() - t0
    gold = {ex.example_id: ex.label for ex in split.test}
    return Experiment(split=split, vocab=vocab, config=config, runs=runs, logs=logs,
                      models=models, gold=gold, train_seconds=train_seconds)


def _means(experiment, objective):
    pcs, accs = [], []
    pearsons, mses = [], []
    for seed in SEEDS:
        outs = experiment.runs[objective][seed]
        pcs.append(sc.prediction_consistency(outs))
        pearson, mse = confidence_consistency(outs)
        pearsons.append(pearson)
        mses.append(mse)
        preds = [o.label_l2r for o in outs]
        gold = [experiment.gold[o.example_id] for o in outs]
        accs.append(sc.classification_metrics(preds, gold)[0])
    return {
        "pc": float(np.mean(pcs)),
        "pearson": float(np.mean(pearsons)),
        "mse": float(np.mean(mses)),
        "acc": float(np.mean(accs)),
    }


def test_criterion_3_directional_reproduction(experiment):
    base = _means(experiment, "baseline")
    details = [f"baseline pc={base['pc']:.2f} mse={base['mse']:.3f} "
               f"pearson={base['pearson']:.2f} ({experiment.train_seconds:.0f}s train)"]
    ok = experiment.train_seconds < 900
    for objective in ("consistency_kl", "consistency_js"):
        m = _means(experiment, objective)
        cond_a = m["pc"] >= base["pc"] + 2.0
        cond_b = m["mse"] <= base["mse"] / 5.0
        cond_c = m["pearson"] >= base["pearson"]
        ok = ok and cond_a and cond_b and cond_c
        details.append(
            f"{objective}: pc={m['pc']:.2f} ({'+' if cond_a else 'MISS +'}"
            f"{m['pc'] - base['pc']:.2f} vs +2.0 needed), "
            f"mse={m['mse']:.4f} ({'<=' if cond_b else '>'} {base['mse'] / 5:.4f}), "
            f"pearson={m['pearson']:.2f} ({'>=' if cond_c else '<'} {base['pearson']:.2f})"
        )
    report("3", ok, "; ".join(details))
    base_means = base
    for objective in ("consistency_kl", "consistency_js"):
        m = _means(experiment, objective)
        assert m["pc"] >= base_means["pc"] + 2.0, objective
        assert m["mse"] <= base_means["mse"] / 5.0, objective
        assert m["pearson"] >= base_means["pearson"], objective
    assert experiment.train_seconds < 900, "criterion 3 runtime budget exceeded"


def test_criterion_4_accuracy_non_collapse(experiment):
    base = _means(experiment, "baseline")
    deltas = {}
    for objective in ("consistency_kl", "consistency_js"):
        deltas[objective] = _means(experiment, objective)["acc"] - base["acc"]
    ok = all(abs(d) <= 3.0 for d in deltas.values())
    report("4", ok, f"baseline acc={base['acc']:.2f}; deltas "
                    + ", ".join(f"{k}={v:+.2f}" for k, v in deltas.items()) + " (|delta| <= 3.0)")
    for objective, delta in deltas.items():
        assert abs(delta) <= 3.0, objective


def test_criterion_5_mcnemar_worked_values():
    exact = mcnemar_test([True] * 10, [False] * 10)
    exact_expected = 2.0 * 0.5**10
    corrected = mcnemar_test([True] * 30 + [False] * 10, [False] * 30 + [True] * 10)
    chi_p = float(scipy.stats.chi2.sf(9.025, df=1))
    ok = (
        abs(exact.p_value - 0.001953) <= 1e-6
        and exact.p_value == exact_expected
        and abs(corrected.statistic - 9.025) <= 1e-9
        and corrected.p_value < 0.01
        and abs(corrected.p_value - chi_p) <= 1e-6
        and corrected.significant_at[0.01]
    )
    report("5", ok, f"exact p={exact.p_value:.9f} (ref 0.001953125), "
                    f"statistic={corrected.statistic} (ref 9.025), "
                    f"chi2 p={corrected.p_value:.6f} (< 0.01, oracle {chi_p:.6f})")
    assert abs(exact.p_value - 0.001953) <= 1e-6
    assert abs(corrected.statistic - 9.025) <= 1e-9
    assert corrected.p_value < 0.01
    assert abs(corrected.p_value - chi_p) <= 1e-6


def test_criterion_6_full_run_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth", "--n", "300", "--vocab-size", "32", "--max-words", "4",
                     "--seed", "5", "--out", str(data)]) == 0
    outs = []
    for tag in ("a", "b"):
        run_dir = tmp_path / f"run-{tag}"
        assert cli_main(["train", "--data", str(data), "--out", str(run_dir),
                         "--objective", "consistency_js", "--seeds", "1",
                         "--layers", "2", "--n-heads", "2", "--d-model", "32",
                         "--d-ff", "64", "--max-len", "14", "--epochs", "2",
                         "--batch", "16"]) == 0
        eval_dir = tmp_path / f"eval-{tag}"
        assert cli_main(["eval", "--dataset", str(data / "test.jsonl"),
                         "--checkpoints", str(run_dir / "seed1" / "model.symc"),
                         "--vocab", str(run_dir / "vocab.tsv"),
                         "--audit-k", "30", "--out", str(eval_dir)]) == 0
        outs.append((run_dir, eval_dir))
    (run_a, eval_a), (run_b, eval_b) = outs
    ckpt_same = (run_a / "seed1" / "model.symc").read_bytes() == \
                (run_b / "seed1" / "model.symc").read_bytes()
    log_a = (run_a / "seed1" / "train_log.jsonl").read_text().splitlines()
    log_b = (run_b / "seed1" / "train_log.jsonl").read_text().splitlines()
    logs_same = log_a[1:] == log_b[1:]  # first line holds the timestamp
    reports_same = all(
        (eval_a / name).read_bytes() == (eval_b / name).read_bytes()
        for name in ("report.json", "report.csv")
    )
    ok = ckpt_same and logs_same and reports_same
    report("6", ok, f"checkpoints identical={ckpt_same}, step logs identical={logs_same}, "
                    f"reports identical={reports_same}")
    assert ckpt_same and logs_same and reports_same


def test_criterion_7_lambda_annealing_contract(experiment):
    ok = True
    details = []
    for objective in ("consistency_kl", "consistency_js"):
        for seed in SEEDS:
            lambdas = experiment.logs[objective][seed].lambdas()
            starts_zero = lambdas[0] == 0.0
            ends_max = lambdas[-1] == 100.0
            monotone = all(a <= b for a, b in zip(lambdas, lambdas[1:]))
            ok = ok and starts_zero and ends_max and monotone
    details.append(f"lambda(0)=0.0, lambda(final)=100.0, monotone across "
                   f"{2 * len(SEEDS)} consistency runs")
    report("7", ok, "; ".join(details))
    assert ok


def test_criterion_8_disagreement_extractor(experiment):
    runs = experiment.runs["baseline"]
    records = sc.extract_disagreements(runs, k=30, pairs=experiment.split.test, seed=0)
    # exhaustive re-scoring: fresh dual passes over the whole test split,
    # independent of the outputs the extractor consumed
    fresh = {
        s: sc.dual_forward_dataset(experiment.models["baseline"][s],
                                   experiment.split.test, experiment.vocab)
        for s in SEEDS
    }
    n_seeds = len(SEEDS)
    qualifying = set()
    id_list = [o.example_id for o in fresh[SEEDS[0]]]
    for idx, example_id in enumerate(id_list):
        flips = sum(
            1 for s in SEEDS if fresh[s][idx].label_l2r != fresh[s][idx].label_r2l
        )
        if flips > n_seeds / 2:
            qualifying.add(example_id)
    returned = {r["example_id"] for r in records}
    subset_ok = returned <= qualifying
    complete_ok = (returned == qualifying) if len(qualifying) <= 30 else len(returned) == 30
    per_seed_flips = sum(
        sc.prediction_consistency(runs[s]) < 100.0 for s in SEEDS
    )
    ok = subset_ok and complete_ok and per_seed_flips > 0
    report("8", ok, f"{len(qualifying)} majority-flip examples in test split, "
                    f"{len(returned)} returned (k=30), subset={subset_ok}, "
                    f"complete/capped={complete_ok}")
    assert subset_ok and complete_ok
    # single-seed extraction returns exactly that seed's flips
    one = {SEEDS[0]: runs[SEEDS[0]]}
    single = sc.extract_disagreements(one, k=400, pairs=experiment.split.test, seed=0)
    expected = {o.example_id for o in runs[SEEDS[0]] if o.label_l2r != o.label_r2l}
    assert {r["example_id"] for r in single} == expected


# ---------------------------------------------------------------------------
# supporting checks tied to the same experiment (spec examples, not numbered
# criteria): divergence trend, flip existence, transfer parity
# ---------------------------------------------------------------------------


def test_annealed_weight_suppresses_divergence(experiment):
    # From a random initialization the divergence starts at the noise floor
    # (there is no pretrained order-sensitivity to remove), grows while the
    # consistency weight is still small, and is then driven back down as the
    # weight anneals toward its maximum: the final epoch must sit strictly
    # below the peak epoch.
    for objective in ("consistency_kl", "consistency_js"):
        for seed in SEEDS:
            log = experiment.logs[objective][seed]
            means = [log.epoch_mean("divergence", ep) for ep in range(EPOCHS)]
            assert means[-1] < max(means), f"{objective} seed {seed}: {means}"


def test_baseline_exhibits_an_order_flipping_pair(experiment):
    flips = [
        o for o in experiment.runs["baseline"][SEEDS[0]] if o.label_l2r != o.label_r2l
    ]
    assert flips, "expected at least one order-flipping pair on the baseline model"


def test_consistency_training_does_not_change_transferred_accuracy(experiment, tmp_path):
    # Both arms follow the same protocol: symmetric fine-tuning, then further
    # fine-tuning on the single-input task through the standard head. The
    # consistency objective must not move the transferred accuracy by more
    # than 5 points relative to the baseline-objective transfer.
    singles = sc.synth_single(800, 64, 5, seed=21)
    split = sc.split_dataset(singles, (0.7, 0.1, 0.2), seed=21, name="synthetic-single")
    vocab = experiment.vocab
    ids = np.stack([encode_single(vocab, e.text_a, experiment.config.max_len).token_ids
                    for e in split.test])
    mask = np.stack([encode_single(vocab, e.text_a, experiment.config.max_len).attention_mask
                     for e in split.test])
    gold = [e.label for e in split.test]

    def accuracy(model):
        probs = ad.softmax(forward_batch(model, ids, mask, "cls")).data
        return sc.classification_metrics(list(np.argmax(probs, axis=1)), gold)[0]

    accs = {"baseline": [], "consistency_js": []}
    for source in accs:
        for seed in SEEDS:
            tcfg = sc.TrainConfig(epochs=3, batch_size=16, learning_rate=1e-3, seed=seed,
                                  objective="baseline", head="cls")
            path = tmp_path / f"{source}-{seed}.symc"
            sc.save_checkpoint(experiment.models[source][seed], path)
            transferred, _ = sc.transfer_finetune(sc.load_checkpoint(path), split, tcfg, vocab)
            assert transferred.role == "transferred"
            accs[source].append(accuracy(transferred))

    gap = abs(float(np.mean(accs["consistency_js"])) - float(np.mean(accs["baseline"])))
    assert gap <= 5.0, (
        f"transferred-from-consistency {np.mean(accs['consistency_js']):.1f} vs "
        f"transferred-from-baseline {np.mean(accs['baseline']):.1f}"
    )
