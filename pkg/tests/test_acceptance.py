"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line with the measured value and its runtime.
Run with ``pytest tests/test_acceptance.py -s`` to see them.
"""
import functools
import math
import time
import zlib

import numpy as np
import pytest

from rlbioaug import augment as aug
from rlbioaug import autodiff as ad
from rlbioaug import checkpoint
from rlbioaug.contrastive import info_nce, make_views
from rlbioaug.data import TRAIN
from rlbioaug.metrics import balanced_accuracy, macro_f1
from rlbioaug.model import PAD_ACTION, PolicyConfig, init_policy, policy_forward
from rlbioaug.pipeline import (ExperimentConfig, _phase2_actions, embed_dataset, linear_probe, phase1_train_agent,
                               phase2_pretrain, run_experiment, trace_to_csv)
from rlbioaug.reward import ReferenceSet, reward, soft_knn_class_probs
from rlbioaug.rl import ExplorationSchedule, StepBatch, advantage, entropy, policy_loss, rl_step, top_k_sample

from _fd import check
from conftest import TINY
from test_autodiff import _cases
from test_contrastive import brute_info_nce
from test_reward import LABELS_2D, REF_2D, brute_probs

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
TASKS = ("GlobalContext", "LocalPattern")
PHASE2_STEPS = 300
ACTIONS = ("p_mask", "p_perm", "p_crop", "p_flip", "p_warp")


def report(name, ok, value, t0):
    print(f"\n{'PASS' if ok else 'FAIL'} {name}: {value} [{time.time() - t0:.1f}s]")
    assert ok, f"{name}: {value}"


def experiment_cfg(task, seed, **kw):
    return ExperimentConfig(synth=dict(task=task, n_subjects=20, epochs_per_subject=120, seed=seed),
                            encoder=dict(channels=(8, 16, 32), embedding_dim=32, projection_dim=16),
                            lr_enc=0.02, momentum=0.9, lr_agent=0.05, k_neighbors=10,
                            phase1_steps=1000, phase2_steps=PHASE2_STEPS, seed=seed, **kw)


@functools.lru_cache(maxsize=None)
def dataset(task, seed):
    return experiment_cfg(task, seed).load_dataset()


_phase1_time: dict = {}


@functools.lru_cache(maxsize=None)
def phase1(task, seed, reward_mode):
    # shared between the agent-preference, RL-vs-random and reward-mode checks
    t0 = time.time()
    res = phase1_train_agent(experiment_cfg(task, seed, reward_mode=reward_mode), dataset(task, seed))
    _phase1_time[task, seed, reward_mode] = time.time() - t0
    return res


def final_soft_knn(task, seed, reward_mode):
    """Mean Soft-KNN reward of the final encoder on the strong views its frozen policy picks.

    Puts the dense and the 0/1 reward modes on one scale.
    """
    cfg = experiment_cfg(task, seed, reward_mode=reward_mode)
    ds, p1 = dataset(task, seed), phase1(task, seed, reward_mode)
    ecfg = cfg.encoder_config(ds.epoch_len)
    idx = np.flatnonzero(ds.labeled & ~ds.reference)
    X, y = ds.X[idx], ds.labels[idx]
    actions = _phase2_actions(cfg, X, p1.encoder, ecfg, p1.policy, cfg.policy_config(ecfg.embedding_dim),
                              p1.history, cfg.phase1_steps)
    _, strong = make_views(X, actions, [(seed, int(i), cfg.phase1_steps) for i in idx])
    ref = ReferenceSet(embed_dataset(ds.X[ds.reference], p1.encoder, ecfg), ds.labels[ds.reference], ds.n_classes)
    return float(np.mean(reward(embed_dataset(strong, p1.encoder, ecfg), y, ref, cfg.k_neighbors, cfg.tau_knn)))


@functools.lru_cache(maxsize=None)
def probe_mf1(task, seed, mode="RLBioAug", reward_mode="SoftKNN"):
    cfg = experiment_cfg(task, seed, mode=mode, reward_mode=reward_mode)
    ds = dataset(task, seed)
    policy = history = agent_enc = None
    if mode == "RLBioAug":
        p1 = phase1(task, seed, reward_mode)
        policy, history, agent_enc = p1.policy, p1.history, p1.encoder
    p2 = phase2_pretrain(cfg, ds.unlabeled_view(TRAIN), ds.epoch_len, policy, history, agent_encoder=agent_enc)
    return linear_probe(p2.encoder, ds, cfg.encoder_config(ds.epoch_len), cfg.probe_c, seed).mf1


def test_gradient_suite():
    t0 = time.time()
    worst = {}
    for name, build, sample in _cases():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(check(build, sample(rng)) for _ in range(20))
    rng = np.random.default_rng(101)
    worst["info_nce"] = max(check(lambda w, s: info_nce(w, s, 0.5),
                                  [rng.normal(size=(n, 3)), rng.normal(size=(n, 3))])
                            for n in rng.integers(2, 6, size=20))
    errs = []
    for _ in range(20):
        b = int(rng.integers(1, 6))
        actions, adv, beta = rng.integers(0, 5, size=b), advantage(rng.uniform(size=b)), float(rng.uniform())
        errs.append(check(lambda z: policy_loss(ad.softmax(z, axis=1), actions, adv, beta)[0],
                          [rng.normal(size=(b, 5))]))
    worst["policy_loss"] = max(errs)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    elapsed = time.time() - t0
    report("gradient suite", err <= 1e-4 and elapsed < 120,
           f"worst rel err {err:.2e} ({name}) over {len(worst)} functions", t0)


def test_augmentation_invariants():
    t0 = time.time()
    rng = np.random.default_rng(7)
    x = rng.uniform(1, 2, size=101)
    const = np.full(77, 0.3)
    kernels = [lambda v, s: aug.time_masking(v, rng_seed=s), lambda v, s: aug.time_permutation(v, rng_seed=s),
               lambda v, s: aug.crop_resize(v, rng_seed=s), lambda v, s: aug.time_flip(v),
               lambda v, s: aug.time_warp(v, rng_seed=s), lambda v, s: aug.weak_view(v, rng_seed=s)]
    failures = []
    for s in range(100):
        if aug.time_flip(aug.time_flip(x)).tobytes() != x.tobytes():
            failures.append(("flip", s))
        if np.sort(aug.time_permutation(x, rng_seed=s)).tobytes() != np.sort(x).tobytes():
            failures.append(("perm", s))
        y = aug.time_masking(x, rng_seed=s)
        zero = np.flatnonzero(y == 0)
        if len(zero) != int(0.25 * len(x)) or np.any(np.diff(zero) != 1) or \
                y[y != 0].tobytes() != x[y != 0].tobytes():
            failures.append(("mask", s))
        for name, fn in (("crop", aug.crop_resize), ("warp", aug.time_warp)):
            if fn(const, rng_seed=s).tobytes() != const.tobytes():
                failures.append((name, s))
        for i, fn in enumerate(kernels):
            a, b = fn(x, s), fn(x, s)
            if len(a) != len(x) or a.tobytes() != b.tobytes():
                failures.append((f"kernel {i}", s))
    report("augmentation invariants", not failures, f"{len(failures)} violations over 100 seeds", t0)


def test_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(3)
    gaps = []
    for n in range(2, 8):
        weak, strong = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        tau = float(rng.uniform(0.1, 1.0))
        gaps.append(abs(info_nce(weak, strong, tau).item() - brute_info_nce(weak, strong, tau)))
    gaps.append(abs(info_nce(np.eye(4)[:2], np.eye(4)[2:], 0.5).item()
                    - brute_info_nce(np.eye(4)[:2], np.eye(4)[2:], 0.5)))
    ref = ReferenceSet(REF_2D, LABELS_2D, 3)
    for z in ([0.8, 0.2], [0.1, 0.9], [-0.5, -0.1], [0.6, -0.2]):
        gaps.append(np.max(np.abs(soft_knn_class_probs(np.array(z), ref, 3, 0.1)
                                  - brute_probs(z, REF_2D, LABELS_2D, 3, 3, 0.1))))
    for _ in range(10):
        emb, labels, z = rng.normal(size=(12, 4)), rng.integers(0, 3, size=12), rng.normal(size=(5, 4))
        got = soft_knn_class_probs(z, ReferenceSet(emb, labels, 3), 5, 0.2)
        gaps += [np.max(np.abs(row - brute_probs(q, emb, labels, 3, 5, 0.2))) for row, q in zip(got, z)]
    worst = max(gaps)
    report("oracle equivalence", worst < 1e-9, f"max abs gap {worst:.1e}", t0)


def test_formula_checks():
    t0 = time.time()
    h_err = abs(entropy([0.2] * 5) - math.log(5))
    rng = np.random.default_rng(0)
    adv_err = max(abs(advantage(rng.uniform(size=rng.integers(1, 200))).sum()) for _ in range(100))
    cm = np.array([[5, 1, 0], [2, 3, 1], [0, 2, 6]])
    f1 = [2 * (5 / 7) * (5 / 6) / (5 / 7 + 5 / 6), 0.5, 2 * (6 / 7) * (6 / 8) / (6 / 7 + 6 / 8)]
    bacc_ok = balanced_accuracy(cm) == (5 / 6 + 3 / 6 + 6 / 8) / 3 and balanced_accuracy(np.diag([3, 5, 2])) == 1.0
    mf1_ok = abs(macro_f1(cm) - sum(f1) / 3) <= 1e-15 and macro_f1(np.diag([3, 5, 2])) == 1.0
    ok = h_err <= 1e-12 and adv_err <= 1e-12 and bacc_ok and mf1_ok
    report("formula checks", ok,
           f"|H(uniform)-ln5| {h_err:.1e}, max |sum A| {adv_err:.1e}, B-ACC {bacc_ok}, MF1 {mf1_ok}", t0)


def test_bandit_convergence():
    t0 = time.time()
    cfg = PolicyConfig(state_dim=8)
    params = init_policy(cfg, 0)
    rng = np.random.default_rng(0)
    schedule = ExplorationSchedule(total_steps=500)
    hist = (np.full((32, cfg.history_len), PAD_ACTION), np.zeros((32, cfg.history_len)))
    for step in range(500):
        probs = policy_forward((rng.normal(size=(32, 8)), *hist), params, cfg)
        a = np.array([top_k_sample(p, 3, (0, step, i)) for i, p in enumerate(probs.data)])
        rl_step(StepBatch(probs, a, (a == 2).astype(float)), params, 1e-3, schedule, step)
    states = rng.normal(size=(256, 8))
    p = policy_forward((states, np.full((256, cfg.history_len), PAD_ACTION), np.zeros((256, cfg.history_len))),
                       params, cfg).data.mean(axis=0)[2]
    report("bandit convergence", p > 0.9 and time.time() - t0 < 60, f"p(best) {p:.3f} after 500 steps", t0)


def test_agent_preference():
    t0 = time.time()
    want = {"GlobalContext": 0, "LocalPattern": 2}
    lines, ok = [], True
    for task in TASKS:
        finals = [np.array([phase1(task, s, "SoftKNN").trace[-1][c] for c in ACTIONS]) for s in SEEDS]
        hits = sum(int(p.argmax() == want[task]) for p in finals)
        per_task = sum(_phase1_time[task, s, "SoftKNN"] for s in SEEDS)
        ok &= hits >= 2 and per_task < 900
        lines.append(f"{task} {ACTIONS[want[task]]} argmax {hits}/3 ({per_task / 60:.1f} min)")
    report("agent preference", ok, "; ".join(lines), t0)


def test_rl_beats_random_selection():
    t0 = time.time()
    lines, ok = [], True
    for task in TASKS:
        rl = np.mean([probe_mf1(task, s) for s in SEEDS])
        rnd = np.mean([probe_mf1(task, s, mode="RandomSelection") for s in SEEDS])
        ok &= rl - rnd >= 0.03
        lines.append(f"{task} RL {rl:.3f} vs random {rnd:.3f} (gap {100 * (rl - rnd):+.1f} pts)")
    shared = sum(_phase1_time.get((t, s, "SoftKNN"), 0.0) for t in TASKS for s in SEEDS)
    total = time.time() - t0 + shared
    ok &= total < 1800
    report("RL vs random selection", ok,
           "; ".join(lines) + f"; {total / 60:.1f} min including {shared / 60:.1f} min shared phase 1", t0)


def test_reward_modes():
    t0 = time.time()
    lines, ok = [], True
    for task in TASKS:
        final = {rm: np.mean([final_soft_knn(task, s, rm) for s in SEEDS]) for rm in ("SoftKNN", "Accuracy")}
        soft = np.mean([probe_mf1(task, s) for s in SEEDS])
        ssl = np.mean([probe_mf1(task, s, reward_mode="SSLLoss") for s in SEEDS])
        ok &= final["SoftKNN"] >= final["Accuracy"] and soft >= ssl
        lines.append(f"{task} final Soft-KNN score SoftKNN {final['SoftKNN']:.3f} vs Accuracy {final['Accuracy']:.3f}, "
                     f"MF1 SoftKNN {soft:.3f} vs SSLLoss {ssl:.3f}")
    report("reward modes", ok, "; ".join(lines), t0)


def test_determinism():
    t0 = time.time()
    cfg = ExperimentConfig.from_dict(dict(TINY))
    runs = [run_experiment(cfg) for _ in range(2)]
    same_report = runs[0].report.to_json() == runs[1].report.to_json()
    same_trace = trace_to_csv(runs[0].trace) == trace_to_csv(runs[1].trace)
    same_enc = checkpoint.dumps(runs[0].encoder) == checkpoint.dumps(runs[1].encoder)
    report("determinism", same_report and same_trace and same_enc,
           f"report {same_report}, trace {same_trace}, encoder {same_enc}", t0)


def test_label_hygiene():
    t0 = time.time()
    cfg = ExperimentConfig.from_dict(dict(TINY))
    ds = cfg.load_dataset()
    p1 = phase1_train_agent(cfg, ds)
    hidden = ds.hide_labels()
    all_hidden = bool(np.all(hidden.labels == -1))
    p2 = phase2_pretrain(cfg, hidden.unlabeled_view(TRAIN), ds.epoch_len, p1.policy, p1.history,
                         agent_encoder=p1.encoder)
    loaded = checkpoint.loads(checkpoint.dumps(p2.encoder))
    valid = set(loaded) == set(p2.encoder) and all(np.all(np.isfinite(v.data)) for v in loaded.values())
    report("label hygiene", all_hidden and valid, f"labels hidden {all_hidden}, checkpoint valid {valid}", t0)
