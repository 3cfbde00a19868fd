"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated in the terminal summary.  The obedience/NDCG protocol trains 20 models
(5 seeds x 4 weightings) and takes several minutes on one CPU core.
"""

import time

import numpy as np
import pytest
import torch

import reference as ref
from principled_rerank.cli import main
from principled_rerank.core import scores_to_positions
from principled_rerank.data import SynthConfig, generate
from principled_rerank.losses import cs_loss, principled_loss
from principled_rerank.metrics import evaluate, list_auc, list_map_at_k, list_ndcg, list_precision_at_k
from principled_rerank.model import RerankerConfig, get_flat_params, init_params
from principled_rerank.obedience import obedience_report
from principled_rerank.training import TrainConfig, grad_check_sample, gradient_check, train
from test_training import plain_log_loss_training, same_params

# -- criterion 1 -------------------------------------------------------------------------

GRAD_CONFIGS = [
    dict(n=4, d_item=3, d_user=2, d_model=8, n_heads=2, mlp_hidden=[8], n_blocks=1, seed=0, swap_k=1),
    dict(n=5, d_item=2, d_user=0, d_model=4, n_heads=1, mlp_hidden=[6, 3], n_blocks=2, seed=1, swap_k=3),
    dict(n=6, d_item=4, d_user=3, d_model=16, n_heads=4, mlp_hidden=[8], n_blocks=1, seed=2, swap_k=0),
]


def test_gradient_correctness(verdict):
    start = time.perf_counter()
    reports = []
    for c in GRAD_CONFIGS:
        cfg = RerankerConfig(d_item=c["d_item"], d_user=c["d_user"], d_model=c["d_model"], n_heads=c["n_heads"],
                             n_blocks=c["n_blocks"], mlp_hidden=c["mlp_hidden"], n_max=c["n"], seed=c["seed"])
        sample = grad_check_sample(c["n"], c["d_item"], c["d_user"], c["seed"])
        reports.append(gradient_check(cfg, sample, c["swap_k"], h=1e-5, threshold=1e-4))
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in reports)
    ok = all(r.passed for r in reports) and elapsed < 60
    assert verdict("1 gradient correctness", ok,
                   f"{len(reports)} configs, max relative error {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 60s)")


# -- criterion 2 -------------------------------------------------------------------------


def test_cs_loss_law(verdict):
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        pa, pb = rng.permutation(n), rng.permutation(n)
        sa, sb = rng.random(n), rng.random(n)
        failures += cs_loss(pa, pa, sa, sb) != 0.0
        failures += cs_loss(pa, pb, sa, sa) != 0.0
        weight_and_gap = (pa != pb) & (sa != sb)
        if weight_and_gap.any():
            failures += not cs_loss(pa, pb, sa, sb) > 0.0
        else:
            failures += cs_loss(pa, pb, sa, sb) != 0.0
    hand = cs_loss([0, 1], [1, 0], [0.7, 0.3], [0.4, 0.6])
    # 1 * 0.3^2 + 1 * 0.3^2 in binary floating point
    expected = (0.7 - 0.4) ** 2 + (0.3 - 0.6) ** 2
    ok = failures == 0 and hand == expected and abs(hand - 0.18) < 1e-15
    assert verdict("2 CS-loss law", ok, f"1000 instances, {failures} violations; hand example {hand!r}")


# -- criterion 3 -------------------------------------------------------------------------


def test_metric_oracle_equivalence(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    mismatched_skips = 0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        scores = rng.choice([0.1, 0.4, 0.7], size=n) if rng.random() < 0.3 else rng.random(n)
        labels = (rng.random(n) < 0.4).astype(float)
        pos = scores_to_positions(scores, rng.permutation(n))
        pairs = [(list_auc(scores, labels), ref.auc(scores, labels)), (list_ndcg(pos, labels), ref.ndcg(pos, labels))]
        for k in (5, 10, 15, 20):
            pairs.append((list_map_at_k(pos, labels, k), ref.average_precision_at(pos, labels, k)))
            pairs.append((list_precision_at_k(pos, labels, k), ref.precision_at(pos, labels, k)))
        for a, b in pairs:
            if a is None or b is None:
                mismatched_skips += (a is None) != (b is None)
            else:
                worst = max(worst, abs(a - b))
    hand = (list_auc([0.1, 0.5, 0.9], [1, 0, 1]), list_ndcg([1, 0], [1, 0]),
            list_map_at_k(np.arange(6), [1, 0, 1, 0, 0, 0], 5))
    hand_ok = hand[0] == 0.5 and abs(hand[1] - 0.63093) < 5e-6 and abs(hand[2] - 0.8333) < 5e-5
    ok = worst <= 1e-12 and mismatched_skips == 0 and hand_ok
    assert verdict("3 metric oracle equivalence", ok,
                   f"100 lists, max |diff| {worst:.1e}; hand cases AUC={hand[0]}, NDCG={hand[1]:.5f}, "
                   f"AP@5={hand[2]:.4f}")


# -- criteria 4 and 5: shared training protocol -----------------------------------------

PROTOCOL_SEEDS = range(5)
PROTOCOL_VARIANTS = {"baseline": (0.0, 0.0), "p1": (1.0, 0.0), "p2": (0.0, 1.0), "both": (1.0, 1.0)}
PROTOCOL_TRAIN = dict(epochs=20, batch_size=32, learning_rate=1e-3)
PROTOCOL_DATA = dict(n_lists=2500, n=10, context_weight=0.5)


@pytest.fixture(scope="module")
def protocol():
    start = time.perf_counter()
    results = {v: [] for v in PROTOCOL_VARIANTS}
    for seed in PROTOCOL_SEEDS:
        data, _ = generate(SynthConfig(**PROTOCOL_DATA, seed=seed))
        train_set, test_set = data.subset(range(2000), "train"), data.subset(range(2000, 2500), "test")
        model_cfg = RerankerConfig(d_item=data.d_item, d_user=data.d_user)
        for variant, weights in PROTOCOL_VARIANTS.items():
            cfg = TrainConfig(**PROTOCOL_TRAIN, seed=seed, principle_weights=weights)
            model, _ = train(cfg, model_cfg, train_set)
            ob = obedience_report(model, test_set, eval_seed=seed)
            results[variant].append((evaluate(model, test_set).ndcg, ob.p1_rate, ob.p2_rate))
    means = {v: np.mean(r, axis=0) for v, r in results.items()}
    return means, results, time.perf_counter() - start


@pytest.mark.slow
def test_obedience_directionality(protocol, verdict):
    means, _, elapsed = protocol
    margin_p1 = means["p1"][1] - means["baseline"][1]
    margin_p2 = means["p2"][2] - means["baseline"][2]
    ok = margin_p1 > 0 and margin_p2 > 0 and elapsed < 600
    assert verdict("4 obedience directionality", ok,
                   f"P1 {means['baseline'][1]:.4f} -> {means['p1'][1]:.4f} (margin {margin_p1:+.4f}); "
                   f"P2 {means['baseline'][2]:.4f} -> {means['p2'][2]:.4f} (margin {margin_p2:+.4f}); "
                   f"5 seeds x 4 variants in {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_ndcg_non_degradation(protocol, verdict):
    means, _, _ = protocol
    base, full = means["baseline"][0], means["both"][0]
    floor = base * (1 - 0.005)
    assert verdict("5 NDCG non-degradation", full >= floor,
                   f"both-principles NDCG {full:.5f} vs baseline {base:.5f} (floor {floor:.5f})")


# -- criterion 6 -------------------------------------------------------------------------


def test_zero_weights_equal_plain_training(verdict):
    data, _ = generate(SynthConfig(n_lists=64, n=6, d_item=4, d_user=3, seed=0))
    model_cfg = RerankerConfig(d_item=4, d_user=3, d_model=16, n_heads=2, mlp_hidden=[16])
    cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=1e-3, seed=1, principle_weights=(0.0, 0.0))
    _, snapshots = plain_log_loss_training(cfg, model_cfg, data)
    identical = []
    for epochs in (1, 2, 3):
        model, _ = train(TrainConfig(**{**cfg.to_dict(), "epochs": epochs, "principle_weights": (0.0, 0.0)}),
                         model_cfg, data)
        identical.append(same_params(get_flat_params(model), snapshots[epochs - 1]))
    assert verdict("6 degenerate-weight equivalence", all(identical),
                   f"parameters bit-identical after epochs 1..3: {identical}")


# -- criterion 7 -------------------------------------------------------------------------


def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_cli_determinism(tmp_path, verdict, capsys):
    model_flags = ["--d-model", "8", "--n-heads", "2", "--mlp-hidden", "8", "--batch-size", "8", "--epochs", "2"]
    d = tmp_path
    commands = {
        "generate": ["generate", "-o", f"{d}/data/train.jsonl", "--lists", "40", "--n", "5", "--seed", "3"],
        "generate-test": ["generate", "-o", f"{d}/data/test.jsonl", "--lists", "15", "--n", "5", "--seed", "4"],
        "train": ["train", "--data", f"{d}/data/train.jsonl", "--valid", f"{d}/data/test.jsonl", "--eval-every",
                  "1", "--out-dir", f"{d}/train", *model_flags],
        "train-grid": ["train", "--data", f"{d}/data/train.jsonl", "--valid", f"{d}/data/test.jsonl", "--grid",
                       "--out-dir", f"{d}/grid", *model_flags],
        "evaluate": ["evaluate", "--checkpoint", f"{d}/train/checkpoint.json", "--data", f"{d}/data/test.jsonl",
                     "--strict", "--out-dir", f"{d}/eval"],
        "ablate": ["ablate", "--data", f"{d}/data/train.jsonl", "--test", f"{d}/data/test.jsonl", "--seeds", "2",
                   "--out-dir", f"{d}/ablate", *model_flags],
        "gradcheck": ["gradcheck", "--out-dir", f"{d}/gradcheck"],
    }
    codes = [main(argv) for argv in commands.values()]
    first = _snapshot(d)
    codes += [main(argv) for argv in commands.values()]
    second = _snapshot(d)
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = all(c == 0 for c in codes) and not differing and first.keys() == second.keys()
    assert verdict("7 CLI determinism", ok,
                   f"{len(commands)} commands rerun, {len(first)} files compared, differing: {differing or 'none'}")


# -- criterion 8 -------------------------------------------------------------------------


def test_position_blind_sanity(verdict):
    data, _ = generate(SynthConfig(n_lists=200, n=8, seed=9))
    fresh = init_params(RerankerConfig(d_item=data.d_item, d_user=data.d_user, seed=4))
    trained, _ = train(TrainConfig(epochs=2, batch_size=16, learning_rate=1e-2),
                       RerankerConfig(d_item=data.d_item, d_user=data.d_user), data.subset(range(100)))
    with torch.no_grad():
        trained.pos_table.zero_()
    rates, worst = [], 0.0
    for model in (fresh, trained):
        ob = obedience_report(model, data, strict=True)
        rates += [ob.p1_rate, ob.p2_rate]
        for i, s in enumerate(data):
            b = principled_loss(model, s, i % (s.n - 1))
            worst = max(worst, abs(b.total - 3 * b.ce_base))
    ok = all(r == 1.0 for r in rates) and worst <= 1e-12
    assert verdict("8 position-blind sanity", ok,
                   f"obedience rates {rates}; max |total - 3 x base log-loss| {worst:.1e} over 2 x 200 lists")
