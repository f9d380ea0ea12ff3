"""Acceptance suite: one PASS/FAIL line per criterion at the agreed tolerances.

The default-configuration experiments (5 clients, 20 rounds) are run once per
master seed and shared between criteria; expect a few minutes of runtime.
"""

import dataclasses
import itertools
import time

import numpy as np
import pytest

from legaledge.config import ExperimentConfig, LatencyModel
from legaledge.contract import AlreadyConfirmed, EscrowContract, SettleBeforeConfirm, WrongState, compute_schedule
from legaledge.dfa import LEGALEDGE, Event, MachineInstance, State, UndefinedTransition
from legaledge.env import EnvConfig, EnvState
from legaledge.federated import ClientUpdate, aggregate, run_experiment
from legaledge.ledger import Ledger, integrity_score, latency_stats, verify_chain
from legaledge.metrics import convergence_summary
from legaledge.nn import ModelParams, backward, forward, forward_cached, init_params, mse
from legaledge.quant import dequantize, quantize, quantize_tensor, tensor_scale

SEEDS = (0, 1, 2, 3, 4)
_RUNS: dict = {}


def default_run(seed: int):
    if seed not in _RUNS:
        t0 = time.perf_counter()
        res = run_experiment(ExperimentConfig(seed=seed))
        _RUNS[seed] = (res, time.perf_counter() - t0)
    return _RUNS[seed]


def window_mean(metrics, attr, lo, hi):
    return float(np.mean([getattr(m, attr) for m in metrics if lo <= m.round <= hi]))


@pytest.mark.slow
def test_c1_efficiency_trend(report):
    passes, details = 0, []
    for seed in SEEDS:
        res, secs = default_run(seed)
        first = window_mean(res.metrics, "efficiency", 1, 3)
        last = window_mean(res.metrics, "efficiency", 18, 20)
        ok = first <= 0.70 and last >= 0.85 and last - first >= 0.20 and secs < 300
        passes += ok
        details.append(f"seed {seed}: {first:.2f}->{last:.2f} in {secs:.0f}s")
    assert report("C1 efficiency trend", passes >= 4, f"{passes}/5 seeds pass; " + "; ".join(details))


@pytest.mark.slow
def test_c2_convergence(report):
    passes, details = 0, []
    for seed in SEEDS:
        res, _ = default_run(seed)
        cs = convergence_summary([m.td_error for m in res.metrics])
        ok = cs.ratio < 0.40 and cs.plateau_round is not None and cs.plateau_round <= 20
        passes += ok
        details.append(f"seed {seed}: ratio {cs.ratio:.2f}, plateau r{cs.plateau_round}")
    assert report("C2 TD-error convergence", passes >= 4, f"{passes}/5 seeds pass; " + "; ".join(details))


@pytest.mark.slow
def test_c3_integrity(report):
    res, _ = default_run(SEEDS[0])
    clean = [m.integrity for m in res.metrics]
    small = ExperimentConfig(seed=0, rounds=4, episodes_per_epoch=1, fault_period=50)
    faulted = [run_experiment(small) for _ in range(2)]
    scores = [integrity_score(r.ledger) for r in faulted]
    per_round = float(np.mean([m.integrity for m in faulted[0].metrics]))
    ok = (
        all(x == 1.0 for x in clean)
        and abs(scores[0] - 0.98) <= 0.005
        and abs(per_round - 0.98) <= 0.005
        and scores[0] == scores[1]
    )
    assert report(
        "C3 integrity", ok,
        f"fault-free min {min(clean):.3f}; 1-in-50 faults: {scores[0]:.4f} overall, "
        f"{per_round:.4f} mean per round, repeat {scores[1]:.4f}",
    )


def test_c4_latency(report):
    cfg = ExperimentConfig(seed=3, clients=5, rounds=8, local_epochs=1, episodes_per_epoch=1, eval_episodes=1,
                           synthetic_latency=LatencyModel(mean_s=0.12, std_s=0.01))
    res = run_experiment(cfg)
    s = latency_stats(res.ledger)
    reported = all(m.latency_mean_s > 0 and m.latency_p99_s >= m.latency_mean_s for m in res.metrics)
    real = run_experiment(cfg.model_copy(update={"synthetic_latency": None}))
    reported = reported and all(m.latency_mean_s > 0 for m in real.metrics)
    ok = s.count >= 1000 and abs(s.mean - 0.12) <= 0.005 and reported
    assert report("C4 latency", ok, f"synthetic mean {s.mean:.4f}s over {s.count} calls, p99 {s.p99:.4f}s; "
                                    f"wall-clock mean {latency_stats(real.ledger).mean * 1e6:.1f}us")


def test_c5_aggregation_oracle(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 11))
        dim = int(rng.integers(2, 10_001))
        shapes = [(1, dim - 1)]
        vecs = [rng.normal(0, 5, size=dim) for _ in range(n)]
        counts = [int(c) for c in rng.integers(1, 5000, size=n)]
        ups = [ClientUpdate(k, c, 1, params=ModelParams.from_flat(shapes, v))
               for k, (c, v) in enumerate(zip(counts, vecs))]
        got = aggregate(ups).flat()
        total = float(sum(counts))
        want = np.zeros(dim)
        for c, v in zip(counts, vecs):
            want += (c / total) * v
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert report("C5 aggregation oracle", worst < 1e-9, f"max abs error {worst:.2e} over 100 instances")


EXPECTED_EDGES = {
    ("Drafted", "SigningRequestReceived"): "Signed",
    ("Signed", "ContractExecutionTriggered"): "Active",
    ("Active", "TransactionConditionMet"): "Triggered",
    ("Active", "RegulatoryUpdateDetected"): "Updated",
    ("Active", "DisputeFiled"): "Disputed",
    ("Disputed", "ResolutionUpheld"): "Active",
    ("Active", "AllObligationsMet"): "Completed",
    ("Active", "ViolationDetected"): "Terminated",
    ("Disputed", "ResolutionTerminated"): "Terminated",
    ("Triggered", "ClauseExecuted"): "Active",
    ("Updated", "ComplianceApplied"): "Active",
}


def test_c6_dfa_conformance(report):
    mismatches = 0
    pairs = 0
    for s, e in itertools.product(State, Event):
        pairs += 1
        m = MachineInstance(LEGALEDGE, current=s.value)
        want = EXPECTED_EDGES.get((s.value, e.value))
        try:
            m.step(e)
            got = m.current
        except UndefinedTransition:
            got = None
            if m.current != s.value:
                mismatches += 1
        mismatches += got != want
    finals_absorb = all(
        LEGALEDGE.delta(f, e.value) is None for f in LEGALEDGE.finals for e in Event
    )
    ok = mismatches == 0 and finals_absorb and pairs == 88
    assert report("C6 DFA conformance", ok, f"{pairs} pairs checked, {mismatches} mismatches, finals absorb: {finals_absorb}")


def test_c7_gradient_check(report):
    rng = np.random.default_rng(77)
    worst = 0.0
    eps = 1e-6
    for _ in range(50):
        sizes = [int(rng.integers(2, 7)), int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 6))]
        p = init_params(sizes, rng)
        for _, b in p.layers:
            b[...] = rng.normal(0, 0.5, b.shape)
        x = rng.normal(size=(3, sizes[0]))
        y = rng.normal(size=(3, sizes[-1]))
        out, cache = forward_cached(p, x)
        analytic = backward(p, cache, mse(out, y)[1]).flat()
        flat = p.flat()
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += eps
            dn[i] -= eps
            numeric[i] = (mse(forward(ModelParams.from_flat(p.shapes, up), x), y)[0]
                          - mse(forward(ModelParams.from_flat(p.shapes, dn), x), y)[0]) / (2 * eps)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(rel))
    assert report("C7 gradient check", worst < 1e-4, f"worst relative error {worst:.2e} over 50 nets")


@pytest.mark.slow
def test_c8_quantization(report):
    rng = np.random.default_rng(8)
    # (a) deterministic round trip
    worst_ratio = 0.0
    for _ in range(100):
        x = rng.normal(0, rng.uniform(0.01, 20), size=int(rng.integers(1, 500)))
        q = quantize_tensor(x)
        worst_ratio = max(worst_ratio, float(np.max(np.abs(q.dequantize() - x)) / q.scale))
    ok_a = worst_ratio <= 0.5 + 1e-12

    # (b) stochastic unbiasedness at 1e5 draws
    x = rng.uniform(-1, 1, size=16)
    s = tensor_scale(x)
    n = 100_000
    y = x / s
    lo = np.floor(y)
    total = np.zeros_like(x)
    for _ in range(n // 10_000):
        batch = np.stack([quantize_tensor(x, "stochastic", rng, scale=s).q for _ in range(10_000)]).astype(np.float64)
        total += batch.sum(axis=0)
    mean = total / n * s
    frac = y - lo
    sigma = s * np.sqrt(frac * (1 - frac) / n)
    z = np.abs(mean - x) / np.where(sigma > 0, sigma, np.inf)
    ok_b = bool(np.all(np.abs(mean - x) <= 3 * sigma + 1e-15))

    # (c) argmax agreement on a trained model
    res, _ = default_run(SEEDS[0])
    params = res.params
    deq = dequantize(quantize(params))
    cfg = EnvConfig()
    srng = np.random.default_rng(9)
    states = []
    for _ in range(1000):
        stored = int(srng.integers(0, cfg.battery_centi + 1))
        states.append(EnvState(stored, int(srng.integers(0, 24)), 0, stored, cfg).features())
    states = np.array(states)

    def agreement(p, d):
        return float(np.mean(np.argmax(forward(p, states), 1) == np.argmax(forward(d, states), 1)))

    agree = agreement(params, deq)
    ok_c = agree >= 0.90
    # other seeds' models are reported for context; the criterion uses the first seed's
    others = ", ".join(
        f"{agreement(r.params, dequantize(quantize(r.params))):.3f}"
        for seed, (r, _) in sorted(_RUNS.items()) if seed != SEEDS[0]
    )

    assert report(
        "C8 quantization", ok_a and ok_b and ok_c,
        f"(a) max err {worst_ratio:.3f} scale; (b) max |z| {float(z.max()):.2f} at 1e5 draws; "
        f"(c) argmax agreement {agree:.3f} (other seeds: {others or 'not run'})",
    )


@pytest.mark.slow
def test_c9_ledger(report):
    led = Ledger()
    for i in range(1000):
        led.record(f"c{i % 7}", "reward_query", {"i": i, "penalties": 0, "error": None})
        led.commit()
    chain_ok = verify_chain(led).ok and len(led) == 1000

    rng = np.random.default_rng(99)
    blocks = led.blocks
    detected = 0
    for _ in range(1000):
        h = int(rng.integers(len(blocks)))
        b = blocks[h]
        tx = b.tx_list[0]
        field = int(rng.integers(4))
        if field == 0:
            buf = bytearray(tx.payload)
            buf[rng.integers(len(buf))] ^= 1 << int(rng.integers(8))
            b = dataclasses.replace(b, tx_list=(dataclasses.replace(tx, payload=bytes(buf)),))
        elif field == 1:
            buf = bytearray(b.prev_hash)
            buf[rng.integers(32)] ^= 1 << int(rng.integers(8))
            b = dataclasses.replace(b, prev_hash=bytes(buf))
        elif field == 2:
            buf = bytearray(b.block_hash)
            buf[rng.integers(32)] ^= 1 << int(rng.integers(8))
            b = dataclasses.replace(b, block_hash=bytes(buf))
        else:
            b = dataclasses.replace(b, tx_list=(dataclasses.replace(tx, tick=tx.tick ^ (1 << int(rng.integers(12)))),))
        tampered = list(blocks)
        tampered[h] = b
        detected += not verify_chain(tampered).ok

    first, _ = default_run(SEEDS[0])
    again = run_experiment(ExperimentConfig(seed=SEEDS[0]))
    same = first.ledger_hash == again.ledger_hash and first.model_hash == again.model_hash
    ok = chain_ok and detected == 1000 and same
    assert report("C9 ledger", ok, f"1000-block chain valid: {chain_ok}; tamper detected {detected}/1000; "
                                   f"seeded rerun identical: {same}")


def test_c10_contract_safety(report):
    schedule = compute_schedule(20, [0.5] * 24, 10)
    calls = ("deposit", "confirm", "settle")
    violations = 0
    sequences = 0
    for delivered in (20.0, 12.0, 0.0):
        for n in range(6):
            for seq in itertools.product(calls, repeat=n):
                sequences += 1
                c = EscrowContract("c", schedule)
                c.sign()
                for op in seq:
                    try:
                        if op == "deposit":
                            c.deposit(schedule.deposit_required)
                        elif op == "confirm":
                            c.confirm_delivery(delivered)
                        else:
                            c.settle()
                    except (WrongState, SettleBeforeConfirm, AlreadyConfirmed):
                        pass
                    violations += not c.conserved()
                if c.payout > 0:
                    it = iter(seq)
                    in_order = all(any(x == p for x in it) for p in calls)
                    violations += not in_order
    ok = violations == 0
    assert report("C10 contract safety", ok, f"{sequences} call sequences, {violations} violations")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
