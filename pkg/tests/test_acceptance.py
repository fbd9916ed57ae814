"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The learning, churn, ablation and router criteria train 25 toy models in
total (about 2 minutes each on one CPU core).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles as O
from sdfn import tensor as T
from acceptance_log import record
from sdfn.checks import run_suite
from sdfn.config import TrainConfig
from sdfn.data import build_dataset
from sdfn.experiments import MODULE_REMOVALS, mean_churn, variant_config
from sdfn.losses import bbc_loss, consistency_loss, spd_loss
from sdfn.router import forward_network, init_network, propagate
from sdfn.training import Trainer, run_training

GOLDEN = Path(__file__).parent / "golden"
PAIRED_SEEDS = (0, 1, 2)

# tolerances and thresholds, pinned
GRAD_TOL, GRAD_H, GRAD_BUDGET_S = 1e-4, 1e-4, 120.0
SIMPLEX_TOL = 1e-9
PROPAGATE_TOL = 1e-12
SPD_GOLDEN, SPD_TOL = 1.84847, 1e-4
BBC_GOLDEN, BBC_TOL = 0.31326, 1e-5
MIN_R1, MIN_R10, LEARN_BUDGET_S = 0.80, 0.98, 600.0
CURVE_DRIFT = 0.05
CHURN_FROM_EPOCH = 6
MAJORITY = 2


class Runs:
    """Memoised toy trainings keyed by (variant, seed)."""

    def __init__(self):
        self.logs, self.data, self.seconds = {}, {}, {}

    def get(self, variant, seed):
        key = (variant, seed)
        if key not in self.logs:
            cfg = variant_config(TrainConfig(seed=seed), variant) if variant != "lam0" else TrainConfig(seed=seed, lam=0.0)
            if seed not in self.data:
                self.data[seed] = build_dataset(cfg)
            start = time.perf_counter()
            _, log, _ = run_training(cfg, self.data[seed])
            self.seconds[key] = time.perf_counter() - start
            self.logs[key] = log
        return self.logs[key]


@pytest.fixture(scope="module")
def runs():
    return Runs()


def test_c1_gradient_oracle():
    start = time.perf_counter()
    reports = run_suite(range(5), h=GRAD_H, tol=GRAD_TOL)
    elapsed = time.perf_counter() - start
    worst_key = max(reports, key=lambda k: reports[k].max_error)
    worst = reports[worst_key].max_error
    kinks = sum(sum(r.kinks.values()) for r in reports.values())
    failed = sorted({name for (name, _), r in reports.items() if not r.passed})
    ok = not failed and elapsed < GRAD_BUDGET_S
    record("C1 gradient oracle", ok,
           f"{len(reports)} component/seed checks, max rel err {worst:.2e} at {worst_key} (tol {GRAD_TOL:g}), "
           f"{kinks} kink re-probe(s), failed {failed or 'none'}, {elapsed:.0f}s (budget {GRAD_BUDGET_S:.0f}s)")
    assert ok


def test_c2_routing_simplex():
    rng = np.random.default_rng(123)
    worst = 0.0
    for router, active in (("msr", ("cam", "jrm", "gtm", "rcm")), ("sr", ("cam", "jrm", "gtm", "rcm")),
                           ("msr", ("cam", "jrm", "gtm"))):
        p = {k: T.Tensor(v) for k, v in init_network(rng, 32, 4, 128, 3, router=router, active=active).items()}
        x = rng.normal(size=(1000, 16, 32)) * 2
        tw = rng.normal(size=(1000, 8, 32)) * 2
        res = forward_network(x, tw, tw.max(axis=1), p, n_layers=3, heads=4, router=router, active=active)
        probs = res.probs.data
        assert probs.shape == (1000, 2 * len(active) + 1, 4)
        worst = max(worst, np.abs(probs.sum(-1) - 1).max())
        assert (probs >= 0).all()
    ok = worst <= SIMPLEX_TOL
    record("C2 routing simplex", ok, f"3 x 1000 queries, every site incl. aggregation, max |sum-1| {worst:.1e} "
                                     f"(tol {SIMPLEX_TOL:g})")
    assert ok


def test_c3_propagate_equivalence():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        k, d = rng.integers(1, 17, size=2)
        outs = [rng.normal(size=(k, d)) for _ in range(4)]
        r = rng.random((4, 4))
        r /= r.sum(axis=1, keepdims=True)
        got = np.stack([m.data for m in propagate(outs, r)])
        worst = max(worst, float(np.abs(got - O.propagate_ref(outs, r)).max()))
    ok = worst <= PROPAGATE_TOL
    record("C3 propagate vs triple loop", ok, f"100 instances, max abs diff {worst:.1e} (tol {PROPAGATE_TOL:g})")
    assert ok


def test_c4_loss_identities():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(5, 8))
    x = rng.normal(size=(5, 9, 4))
    bbc1 = float(bbc_loss(rng.normal(size=(1, 8)), rng.normal(size=(1, 8))).data)
    cons = float(consistency_loss(f, f, f).data)
    spd0 = float(spd_loss(x, x, 2.0).data)
    spd = float(spd_loss(np.array([[[2.0, 0.0]]]), np.array([[[0.0, 2.0]]]), 2.0).data)
    bbc = float(bbc_loss(np.eye(2), np.eye(2), scale=1.0).data)
    ok = (bbc1 == 0.0 and cons == 0.0 and spd0 == 0.0 and abs(spd - SPD_GOLDEN) <= SPD_TOL
          and abs(bbc - BBC_GOLDEN) <= BBC_TOL)
    record("C4 loss identities", ok, f"bbc(B=1)={bbc1!r} cons(f,f,f)={cons!r} spd(x,x)={spd0!r} "
                                     f"spd golden {spd:.6f} vs {SPD_GOLDEN}±{SPD_TOL:g} "
                                     f"bbc golden {bbc:.6f} vs {BBC_GOLDEN}±{BBC_TOL:g}")
    assert ok


def test_c5_learning(runs):
    log = runs.get("sdfn", 42)
    elapsed = runs.seconds[("sdfn", 42)]
    last = log[-1]
    golden = json.loads((GOLDEN / "toy_seed42_curve.json").read_text())
    drift = abs(last["R1"] - golden["R1"][-1])
    ok = last["R1"] >= MIN_R1 and last["R10"] >= MIN_R10 and elapsed < LEARN_BUDGET_S and drift <= CURVE_DRIFT
    record("C5 learning", ok, f"toy seed 42, {len(log)} epochs: R@1 {last['R1']:.3f} (>= {MIN_R1}), "
                              f"R@10 {last['R10']:.3f} (>= {MIN_R10}), chance {1 / 256:.3f}, {elapsed:.0f}s "
                              f"(budget {LEARN_BUDGET_S:.0f}s), final R@1 drift vs golden curve {drift:.3f}")
    assert ok


def test_c6_spd_churn(runs):
    wins, parts = 0, []
    for seed in PAIRED_SEEDS:
        with_spd = mean_churn(runs.get("sdfn", seed), CHURN_FROM_EPOCH)
        without = mean_churn(runs.get("lam0", seed), CHURN_FROM_EPOCH)
        wins += with_spd < without
        parts.append(f"seed {seed}: {with_spd:.4f} vs {without:.4f}")
    ok = wins >= MAJORITY
    record("C6 SPD churn", ok, f"mean churn epochs {CHURN_FROM_EPOCH}-30, lambda 0.6 vs 0: " + "; ".join(parts)
           + f" -> lower in {wins}/3 (need {MAJORITY})")
    assert ok


@pytest.mark.xfail(strict=True, reason=(
    "holds in 1 of 3 seeds: GTM can emulate the copy (alpha constant, beta zero, then LN), so dropping RCM "
    "often costs little, while removing JRM, which attends across positions after sentence fusion, hurts more"))
def test_c7_ablation_direction(runs):
    wins, parts = 0, []
    for seed in PAIRED_SEEDS:
        full = runs.get("sdfn", seed)[-1]["R1"]
        drops = {v: full - runs.get(v, seed)[-1]["R1"] for v in MODULE_REMOVALS}
        largest = max(drops, key=drops.get)
        wins += largest == "no-rcm" and drops["no-rcm"] > max(d for v, d in drops.items() if v != "no-rcm")
        parts.append(f"seed {seed}: full {full:.3f}, drops " + " ".join(f"{v} {d:+.3f}" for v, d in drops.items()))
    ok = wins >= MAJORITY
    record("C7 ablation direction", ok, "; ".join(parts) + f" -> no-rcm largest in {wins}/3 (need {MAJORITY})")
    assert ok


def test_c8_router(runs):
    wins, parts = 0, []
    for seed in PAIRED_SEEDS:
        msr = runs.get("baseline-msr", seed)[-1]["R10"]
        sr = runs.get("baseline-sr", seed)[-1]["R10"]
        wins += msr >= sr
        parts.append(f"seed {seed}: MSR {msr:.3f} SR {sr:.3f}")
    ok = wins >= MAJORITY
    record("C8 MSR vs SR", ok, "R@10, " + "; ".join(parts) + f" -> MSR >= SR in {wins}/3 (need {MAJORITY})")
    assert ok


def test_c9_determinism(tmp_path):
    cfg = TrainConfig(epochs=3, seed=7)
    data = build_dataset(cfg)
    run_training(cfg, data, out_dir=tmp_path / "a")
    run_training(cfg, build_dataset(cfg), out_dir=tmp_path / "b")
    logs_equal = (tmp_path / "a/metrics.log").read_bytes() == (tmp_path / "b/metrics.log").read_bytes()

    trainer = Trainer.load(tmp_path / "a/checkpoints/epoch_3", data)
    trainer.save(tmp_path / "again")
    again = Trainer.load(tmp_path / "again", data)
    roundtrip = all(trainer.params[k].tobytes() == again.params[k].tobytes()
                    and trainer.adam.m[k].tobytes() == again.adam.m[k].tobytes()
                    and trainer.adam.v[k].tobytes() == again.adam.v[k].tobytes() for k in trainer.params)
    roundtrip &= all(trainer.bank.logits[q].tobytes() == again.bank.logits[q].tobytes() for q in trainer.bank.logits)

    straight = Trainer(cfg, data)
    for _ in range(2):
        straight.run_epoch()
    straight.save(tmp_path / "mid")
    resumed = Trainer.load(tmp_path / "mid", data)
    for idx in straight.batches(3)[:3]:
        straight.train_step(idx, 3)
        resumed.train_step(idx, 3)
    resume = all(straight.params[k].tobytes() == resumed.params[k].tobytes() for k in straight.params)
    ok = logs_equal and roundtrip and resume
    record("C9 determinism", ok, f"metrics logs bit-identical {logs_equal}, checkpoint roundtrip bit-exact "
                                 f"{roundtrip}, resume matches for 3 steps {resume}")
    assert ok
