import csv

import numpy as np
import pytest
from PIL import Image

from neuralslam import env as gw
from neuralslam.evaluation import (
    EvalReport, EpisodeRow, RunConfig, generate_world_set, load_agent, normalized_weight,
    replay_render, run_episode, run_suite, world_files,
)
from neuralslam.model import TOY_ARCH, ArchConfig, CheckpointError, ModelParams, save_checkpoint

from . import oracles

SMALL = ArchConfig(hidden=8, memory_shape=(8, 8), channels=4)


@pytest.fixture
def slam_ckpt(tmp_path):
    path = tmp_path / "slam.npz"
    save_checkpoint(path, ModelParams.create("neural_slam", SMALL, seed=1), step=10)
    return path


def test_world_set_byte_identical(tmp_path):
    generate_world_set(50, 16, 7, tmp_path / "a")
    generate_world_set(50, 16, 7, tmp_path / "b")
    fa, fb = world_files(tmp_path / "a"), world_files(tmp_path / "b")
    assert [f.name for f in fa] == [f.name for f in fb] and len(fa) == 50
    for x, y in zip(fa, fb):
        assert x.read_bytes() == y.read_bytes()
    generate_world_set(3, 16, 8, tmp_path / "c")
    assert (tmp_path / "c" / "world_000.txt").read_bytes() != fa[0].read_bytes()


def test_world_set_connected_with_fixed_start(tmp_path):
    worlds = generate_world_set(20, 12, 3, tmp_path)
    for w, f in zip(worlds, world_files(tmp_path)):
        assert gw.is_connected(w.occupancy)
        assert w.start_pose is not None and not w.is_wall(w.start_pose.x, w.start_pose.y)
        assert gw.load_world(f) == w
        assert gw.parse_world(gw.render_world(w)) == w


def test_world_set_rejects_empty():
    with pytest.raises(ValueError):
        generate_world_set(0, 8, 0)


def test_report_aggregates_recompute_from_rows():
    rows = [EpisodeRow("a", 10, 1.5, True), EpisodeRow("b", 750, -30.0, False), EpisodeRow("c", 42, 9.0, True)]
    rep = EvalReport(rows)
    steps = np.array([10, 750, 42], dtype=float)
    rewards = np.array([1.5, -30.0, 9.0])
    assert rep.mean_steps == steps.mean() and rep.std_steps == steps.std()
    assert rep.mean_reward == rewards.mean() and rep.std_reward == rewards.std()
    assert rep.solved == 2 and rep.success_ratio == 2 / 3


def test_report_csv(tmp_path):
    rep = EvalReport([EpisodeRow("a", 3, 0.1 + 0.2, True)])
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows == [{"world": "a", "steps": "3", "reward": repr(0.1 + 0.2), "solved": "1"}]


def test_run_config_needs_one_world_source():
    with pytest.raises(ValueError):
        RunConfig()
    with pytest.raises(ValueError):
        RunConfig(worlds="x", generate={"n": 1, "size": 8, "seed": 0})


def test_suite_is_bit_reproducible(tmp_path, slam_ckpt):
    generate_world_set(4, 8, 1, tmp_path / "w")
    cfg = RunConfig(agent="neural_slam", checkpoint=str(slam_ckpt), worlds=str(tmp_path / "w"), seed=5, step_cap=120)
    a, b = run_suite(cfg), run_suite(cfg)
    assert [(r.steps, r.reward.hex(), r.solved) for r in a.rows] == \
           [(r.steps, r.reward.hex(), r.solved) for r in b.rows]
    assert [r.world for r in a.rows] == ["world_000", "world_001", "world_002", "world_003"]


def test_step_cap_enforced(tmp_path):
    ckpt = tmp_path / "a3c.npz"
    save_checkpoint(ckpt, ModelParams.create("a3c", TOY_ARCH, seed=0))
    rep = run_suite(RunConfig(agent="a3c", checkpoint=str(ckpt), generate={"n": 6, "size": 10, "seed": 2},
                              step_cap=750))
    assert rep.n == 6 and all(r.steps <= 750 for r in rep.rows)


def test_checkpoint_variant_mismatch(tmp_path, slam_ckpt):
    with pytest.raises(CheckpointError):
        run_suite(RunConfig(agent="a3c_nav2", checkpoint=str(slam_ckpt), generate={"n": 1, "size": 8, "seed": 0}))
    with pytest.raises(ValueError):
        run_suite(RunConfig(agent="a3c", generate={"n": 1, "size": 8, "seed": 0}),
                  params=ModelParams.create("neural_slam", SMALL))
    with pytest.raises(ValueError, match="checkpoint is required"):
        load_agent("neural_slam")


def test_missing_worlds(tmp_path, slam_ckpt):
    with pytest.raises(FileNotFoundError):
        run_suite(RunConfig(agent="neural_slam", checkpoint=str(slam_ckpt), worlds=str(tmp_path / "nope")))
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        run_suite(RunConfig(agent="neural_slam", checkpoint=str(slam_ckpt), worlds=str(tmp_path / "empty")))


def test_scripted_full_coverage_tour_matches_oracle():
    occ = np.zeros((8, 8), dtype=bool)
    tour = oracles.full_coverage_tour(8, 8)
    expected = oracles.trace(occ, (0, 0, 1), tour)
    assert expected[-1][3], "the tour must cover the world"
    world = gw.World(occ, start_pose=gw.AgentPose(0, 0, gw.Heading.EAST))
    script = iter(tour)
    steps, reward, solved = run_episode(None, world, 0, 750, policy=lambda s, o: next(script))
    assert solved and steps == len(expected)
    assert reward == pytest.approx(sum(r for r, *_ in expected), abs=1e-12)


def test_random_agent_unlimited_thousands_of_steps(tmp_path):
    generate_world_set(50, 16, 7, tmp_path)
    rep = run_suite(RunConfig(agent="random", worlds=str(tmp_path), seed=0, step_cap=750))
    # no step limit for the random agent, even with a cap configured
    assert rep.success_ratio == 1.0
    assert 1000 <= rep.mean_steps < 100_000, rep.mean_steps
    assert max(r.steps for r in rep.rows) > 750


def test_replay_frames(tmp_path, slam_ckpt):
    world = generate_world_set(1, 8, 4)[0]
    params = load_agent("neural_slam", slam_ckpt)
    frames = replay_render(params, world, tmp_path, seed=0, step_cap=30)
    L = len(frames) - 1
    assert L == 30  # an untrained agent never solves in 30 steps here, so the cap ends it
    for k in range(L + 1):
        for panel in ("world", "write", "memory", "read"):
            assert (tmp_path / f"frame_{k:04d}_{panel}.png").exists()
        for panel in ("write", "memory", "read"):
            assert (tmp_path / f"frame_{k:04d}_{panel}.csv").exists()
    assert not (tmp_path / f"frame_{L + 1:04d}_world.png").exists()
    # frame 0: blank memory reads as probability 0.5, drawn as flat mid gray
    np.testing.assert_array_equal(frames[0]["memory"], 0.5)
    gray = np.asarray(Image.open(tmp_path / "frame_0000_memory.png"))
    assert np.unique(gray).tolist() == [128]
    for f in frames:
        for panel in ("write", "read"):
            assert abs(f[panel].sum() - 1.0) < 1e-12
        csv_w = np.loadtxt(tmp_path / f"frame_{f['frame']:04d}_write.csv", delimiter=",")
        np.testing.assert_allclose(csv_w, f["write"], rtol=1e-9)
    text = (tmp_path / "transcript.txt").read_text()
    assert text.count("frame ") == L + 1


def test_replay_without_images_and_for_memoryless_agent(tmp_path):
    world = generate_world_set(1, 8, 4)[0]
    frames = replay_render(ModelParams.create("a3c", TOY_ARCH), world, tmp_path, step_cap=5, images=False)
    assert len(frames) == 6
    assert not list(tmp_path.glob("*.png"))
    assert set(frames[0]) >= {"world", "pose", "action"}


def test_normalized_weight_sums_to_one():
    w = np.random.default_rng(0).random((5, 5)) * 3
    assert normalized_weight(w).sum() == pytest.approx(1.0, abs=1e-15)
