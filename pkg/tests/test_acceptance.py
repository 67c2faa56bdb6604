"""Acceptance gate: one PASS/FAIL line per primary criterion.

The two learning criteria read the runs stored under ``artifacts/``
(produced by ``scripts/acceptance_training.sh``) and re-evaluate their
checkpoints here; everything else is computed from scratch.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from neuralslam import autodiff as ad
from neuralslam import env as gw
from neuralslam import memory as mem
from neuralslam.a3c import RolloutBuffer, TrainConfig, a3c_loss, entropy, evaluate, hash_seed, train
from neuralslam.autodiff import Parameter, Tensor
from neuralslam.checks import run_battery
from neuralslam.evaluation import RunConfig, generate_world_set, run_suite
from neuralslam.model import ModelParams, forward, initial_state, load_checkpoint, split_controls

from . import oracles
from .env_worlds import WORLDS, actions

ARTIFACTS = Path(__file__).resolve().parents[1] / "artifacts"
SMOKE_SEEDS = (0, 1, 2)


def test_gradient_battery(report_criterion):
    t0 = time.time()
    results = run_battery("full", tolerance=1e-4)
    elapsed = time.time() - t0
    worst_op = max((r for r in results if not r.name.startswith("toy_agent")), key=lambda r: r.max_rel_error)
    worst_toy = max((r for r in results if r.name.startswith("toy_agent")), key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 300 and min(
        r.instances for r in results if not r.name.startswith("toy_agent")) >= 100
    report_criterion("gradient battery", ok,
                     f"{len(results)} checks, worst op {worst_op.name} {worst_op.max_rel_error:.2e} (<1e-4), "
                     f"worst toy agent {worst_toy.max_rel_error:.2e} (<1e-3), {elapsed:.0f}s (<300s)")
    assert ok


def _random_controls(rng, C):
    raw = Tensor(rng.normal(scale=rng.choice([0.5, 2.0, 6.0]), size=3 * C + 12))
    return split_controls(raw, C, write=True)


def test_addressing_invariants(report_criterion):
    rng = np.random.default_rng(2024)
    H, W, C = 16, 16, 32
    worst = 0.0
    negative = 0
    for i in range(10_000):
        M = Tensor(rng.normal(scale=rng.choice([0.0, 0.1, 3.0]), size=(H * W, C)))
        if i % 2:
            prev = Tensor(mem.init_prior(gw.AgentPose(int(rng.integers(16)), int(rng.integers(16)),
                                                      int(rng.integers(4))), (H, W)))
        else:
            prev = Tensor(rng.dirichlet(np.full(H * W, rng.choice([0.05, 1.0]))).reshape(H, W))
        c = _random_controls(rng, C)
        stages = mem.address(M, prev, c["key"], c["strength"], c["gate"], c["kernel"], c["sharpen"])
        for w in stages.values():
            negative += int(np.any(w.data < 0))
            worst = max(worst, abs(float(w.data.sum()) - 1.0))
    w = Tensor(rng.dirichlet(np.ones(H * W)).reshape(H, W))
    sharpen_id = np.max(np.abs(mem.sharpen(w, Tensor(1.0)).data - w.data))
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    shift_id = np.array_equal(mem.shift(w, Tensor(delta)).data, w.data)
    M = Tensor(rng.normal(size=(H * W, C)))
    onehot = np.zeros((H, W))
    onehot[3, 7] = 1.0
    a = rng.normal(size=C)
    M2 = mem.write(M, Tensor(onehot), Tensor(np.ones(C)), Tensor(a)).data
    slot = 3 * W + 7
    others = np.delete(np.arange(H * W), slot)
    write_ok = np.array_equal(M2[slot], a) and np.array_equal(M2[others], M.data[others])
    ok = negative == 0 and worst <= 1e-6 and sharpen_id <= 1e-12 and shift_id and write_ok
    report_criterion("addressing invariants", ok,
                     f"10000 draws: max |sum-1| {worst:.1e} (<=1e-6), negative stages {negative}; "
                     f"sharpen(z=1) err {sharpen_id:.1e}; delta shift identity {shift_id}; one-hot overwrite {write_ok}")
    assert ok


def test_log_odds_readout(report_criterion):
    p = mem.readout_map(np.zeros((16, 16, 32)))
    ok = p.shape == (16, 16) and bool(np.all(p == 0.5))
    report_criterion("log-odds readout", ok, f"zero memory -> unique values {np.unique(p).tolist()}")
    assert ok


def test_environment_oracle(report_criterion):
    mismatches, steps, worst = [], 0, 0.0
    for name, rows, start, script in WORLDS:
        occ = oracles.grid(rows)
        state, _ = gw.reset(gw.World(occ), pose=gw.AgentPose(*start))
        acts = actions(script)
        for t, (r_exp, pose_exp, done_exp, solved_exp) in enumerate(oracles.trace(occ, start, acts)):
            state, r, obs = gw.step(state, acts[t])
            steps += 1
            worst = max(worst, abs(r - r_exp))
            same = ((state.pose.x, state.pose.y, int(state.pose.heading)) == pose_exp
                    and (state.done, state.solved) == (done_exp, solved_exp)
                    and np.array_equal(obs.sensor, oracles.sensor(occ, *pose_exp)))
            if abs(r - r_exp) > 1e-12 or not same:
                mismatches.append((name, t))
    ok = not mismatches and len(WORLDS) == 20
    report_criterion("environment oracle", ok,
                     f"{len(WORLDS)} worlds, {steps} steps, max reward error {worst:.1e}, mismatches {mismatches[:3]}")
    assert ok


def test_a3c_loss_oracle(report_criterion):
    probs = [[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1]]
    acts, V, G, lam = [3, 0, 1], [0.5, -1.0, 2.0], [1.5, -0.5, 0.0], 0.01
    zs = [Parameter(f"z{t}", np.log(p)) for t, p in enumerate(probs)]
    vs = [Parameter(f"v{t}", [V[t]]) for t in range(3)]
    with ad.Tape() as tape:
        buf = RolloutBuffer()
        for z, v, a in zip(zs, vs, acts):
            buf.add(None, a, 0.0, v, ad.log_softmax(z), ad.softmax(z))
        parts = a3c_loss(buf, G, lam)
    grads = ad.backward(tape, parts.total)
    expect, gerr = 0.0, 0.0
    for t, p in enumerate(probs):
        H = -sum(q * math.log(q) for q in p)
        A = G[t] - V[t]
        expect += -math.log(p[acts[t]]) * A - lam * H + 0.5 * A * A
        gz = np.array([-(float(i == acts[t]) - q) * A + lam * q * (math.log(q) + H) for i, q in enumerate(p)])
        gerr = max(gerr, float(np.max(np.abs(grads[f"z{t}"] - gz))), abs(float(grads[f"v{t}"][0]) + A))
    lerr = abs(float(parts.total.data) - expect)
    rng = np.random.default_rng(7)
    hs = []
    for i in range(10_000):
        z = Tensor(rng.normal(scale=[0.1, 1.0, 10.0, 100.0][i % 4], size=4))
        hs.append(float(entropy(ad.softmax(z), ad.log_softmax(z)).data))
    ok = lerr <= 1e-10 and gerr <= 1e-10 and min(hs) >= 0.0 and max(hs) <= math.log(4) + 1e-12
    report_criterion("A3C loss oracle", ok,
                     f"loss err {lerr:.1e}, grad err {gerr:.1e} (<=1e-10); entropy over 10000 policies in "
                     f"[{min(hs):.2e}, {max(hs):.6f}] vs [0, {math.log(4):.6f}]")
    assert ok


def _eval_records(run_dir: Path) -> list[dict]:
    return [r for r in map(json.loads, open(run_dir / "train.jsonl")) if r["type"] == "eval"]


def test_training_smoke(report_criterion):
    # The final window is the one the trainer ran on the finished parameters.
    # It is replayed here from the stored float32 checkpoint on the same
    # worlds, and the random agent is scored on that window too.
    details, ok = [], True
    random_params = ModelParams.create("random")
    for seed in SMOKE_SEEDS:
        run = ARTIFACTS / "smoke" / f"seed{seed}"
        if not (run / "final.npz").exists():
            report_criterion("training smoke", False, f"missing run {run}; see scripts/acceptance_training.sh")
            pytest.fail(f"missing {run}")
        cfg = json.loads((run / "config.json").read_text())
        evals = _eval_records(run)
        first, last = evals[0], evals[-1]
        window = hash_seed(cfg["seed"], len(evals) - 1)
        params, meta = load_checkpoint(run / "final.npz", expect_variant="neural_slam")
        final = evaluate(params, 8, cfg["eval_length"], seed=window)
        rand = evaluate(random_params, 8, cfg["eval_length"], seed=window, mode="sample")
        cpu = meta.get("extra", {}).get("cpu_seconds", float("inf"))
        good = (last["mean_reward"] > first["mean_reward"] and final.success_ratio >= 0.5
                and rand.success_ratio < final.success_ratio and cfg["workers"] == 4
                and cfg["courses"] == [8] and cpu <= 7200)
        ok &= good
        details.append(f"seed {seed}: eval reward {first['mean_reward']:.2f} -> {last['mean_reward']:.2f}, "
                       f"final success {final.success_ratio:.2f} ({sum(final.solved)}/{final.episodes}, "
                       f"logged {last['success_ratio']:.2f}), random {rand.success_ratio:.2f}, cpu {cpu:.0f}s")
    report_criterion("training smoke", ok, "; ".join(details))
    assert ok


def test_comparative_trend(report_criterion):
    runs = {v: ARTIFACTS / "compare" / v / "final.npz" for v in ("neural_slam", "a3c_nav2")}
    missing = [str(p) for p in runs.values() if not p.exists()]
    if missing:
        report_criterion("comparative trend", False, f"missing {missing}; see scripts/acceptance_training.sh")
        pytest.fail(f"missing {missing}")
    suite12 = {"n": 25, "size": 12, "seed": 12}
    suite16 = {"n": 50, "size": 16, "seed": 7}
    rep12, rep16 = {}, {}
    for v, path in runs.items():
        params, _ = load_checkpoint(path, expect_variant=v)
        rep12[v] = run_suite(RunConfig(agent=v, generate=suite12, seed=0), params=params)
        rep16[v] = run_suite(RunConfig(agent=v, generate=suite16, seed=0), params=params)
    rnd = run_suite(RunConfig(agent="random", generate=suite16, seed=0))
    ns, nav = rep12["neural_slam"], rep12["a3c_nav2"]
    beats = ns.mean_steps < nav.mean_steps and ns.success_ratio > nav.success_ratio
    ratio = rnd.mean_steps / max(rep16["neural_slam"].mean_steps, rep16["a3c_nav2"].mean_steps)
    ok = beats and ratio >= 5.0
    report_criterion("comparative trend", ok,
                     f"12x12 suite: Neural-SLAM {ns.mean_steps:.1f} steps / {ns.success_ratio:.2f} success vs "
                     f"A3C-Nav2 {nav.mean_steps:.1f} / {nav.success_ratio:.2f}; 16x16 suite: random "
                     f"{rnd.mean_steps:.1f} steps, learned {rep16['neural_slam'].mean_steps:.1f} / "
                     f"{rep16['a3c_nav2'].mean_steps:.1f}, ratio {ratio:.1f}x (>=5x)")
    assert ok


def test_forward_throughput(report_criterion):
    params = ModelParams.create("neural_slam", seed=0)
    world = gw.generate_world(16, 0)
    state, obs = gw.reset(world, 0)
    mstate = initial_state(params, state.pose)
    rng = np.random.default_rng(0)
    sensors = [gw.Observation(rng.choice([0.0, 0.5, 1.0], size=15), int(a)) for a in rng.integers(0, 4, 64)]
    for i in range(200):
        _, _, mstate = forward(params, mstate, sensors[i % 64])
    n = 10_000
    t0 = time.perf_counter()
    for i in range(n):
        _, _, mstate = forward(params, mstate, sensors[i % 64])
    rate = n / (time.perf_counter() - t0)
    ok = rate >= 200
    report_criterion("forward throughput", ok, f"{rate:.0f} steps/s over {n} steps (>=200)")
    assert ok


def test_determinism(report_criterion, tmp_path):
    cfg = TrainConfig(variant="neural_slam", workers=1, total_steps=400, eval_interval=200, eval_length=200,
                      seed=11, hidden=16, memory_shape=(8, 8), channels=8)
    a, b = train(cfg), train(cfg)
    train_same = (a.params.flat().tobytes() == b.params.flat().tobytes()
                  and json.dumps([s.as_dict() for s in a.evals]) == json.dumps([s.as_dict() for s in b.evals]))
    gen = {"n": 5, "size": 10, "seed": 3}
    s1 = run_suite(RunConfig(agent="neural_slam", generate=gen, seed=4), params=a.params)
    s2 = run_suite(RunConfig(agent="neural_slam", generate=gen, seed=4), params=a.params)
    suite_same = [(r.steps, r.reward.hex(), r.solved) for r in s1.rows] == \
                 [(r.steps, r.reward.hex(), r.solved) for r in s2.rows]
    generate_world_set(10, 12, 5, tmp_path / "x")
    generate_world_set(10, 12, 5, tmp_path / "y")
    worlds_same = all((tmp_path / "x" / f.name).read_bytes() == f.read_bytes() for f in (tmp_path / "y").iterdir())
    ok = train_same and suite_same and worlds_same
    report_criterion("determinism", ok,
                     f"single-worker training {train_same}, suite evaluation {suite_same}, world generation {worlds_same}")
    assert ok
