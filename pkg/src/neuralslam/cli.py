"""Command-line entry point: ``neuralslam <command> [options]``.

Commands: train, eval, suite, gen-worlds, replay, gradcheck. Options may
come from a JSON or YAML file given with ``--config``; flags override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_SETUP = 0, 1, 2


def _load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON/YAML file with options")
    p.add_argument("--seed", type=int)
    p.add_argument("--agent", help="neural_slam, a3c, a3c_nav1, a3c_nav2, a3c_ext or random")
    p.add_argument("--checkpoint")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralslam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="A3C training with the curriculum")
    _common(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--steps", type=int, help="global environment step budget")
    p.add_argument("--courses", type=int, nargs="+")

    p = sub.add_parser("eval", help="greedy evaluation over a fixed step window on fresh worlds")
    _common(p)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--length", type=int, default=3000)

    p = sub.add_parser("suite", help="one greedy episode per world in a world set")
    _common(p)
    p.add_argument("--worlds", help="directory of world files")
    p.add_argument("--n", type=int, help="generate this many worlds instead of reading --worlds")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--step-cap", type=int, default=750)

    p = sub.add_parser("gen-worlds", help="write a deterministic world set")
    p.add_argument("--config")
    p.add_argument("--n", type=int, help="number of worlds (default 50)")
    p.add_argument("--size", type=int, help="world side length (default 16)")
    p.add_argument("--seed", type=int, help="default 7")
    p.add_argument("--density", type=float, help="wall density (default 0.2)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="render one episode to PNG/CSV frames and a transcript")
    _common(p)
    p.add_argument("--world", required=True, help="world file")
    p.add_argument("--step-cap", type=int, default=750)
    p.add_argument("--no-images", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--scale", choices=("toy", "full"), default="toy")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", action="append", default=[], metavar="OP",
                   help="negate the gradient of OP (negative control)")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_train(args) -> int:
    from .a3c import TrainConfig, config_to_dict, train
    from .model import save_checkpoint

    opts = _load_config(args.config)
    for key, val in (("seed", args.seed), ("workers", args.workers), ("variant", args.agent),
                     ("total_steps", args.steps), ("courses", args.courses)):
        if val is not None:
            opts[key] = val
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    opts.setdefault("log_path", str(out / "train.jsonl"))
    opts.setdefault("checkpoint_dir", str(out / "checkpoints"))
    cfg = TrainConfig.from_dict(opts)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))
    res = train(cfg, callback=lambda s, sh: print(
        f"step {sh.global_steps:>9d} course {s.course:>2d} reward {s.mean_reward:8.3f} "
        f"solved {sum(s.solved)}/{s.episodes}", flush=True))
    save_checkpoint(out / "final.npz", res.params, step=res.global_steps, seeds=[cfg.seed],
                    extra={"cpu_seconds": round(res.cpu_time, 1), "wall_seconds": round(res.wall_time, 1)})
    print(f"done: {res.global_steps} steps, {res.cpu_time:.0f}s CPU, skipped updates {res.skipped_updates}, "
          f"checkpoint {out / 'final.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .a3c import evaluate
    from .evaluation import load_agent

    opts = _load_config(args.config)
    params = load_agent(args.agent or opts.get("agent", "neural_slam"), args.checkpoint or opts.get("checkpoint"))
    stats = evaluate(params, args.size, args.length, seed=args.seed or 0)
    print(json.dumps(stats.as_dict()))
    return EXIT_OK


def cmd_suite(args) -> int:
    from .evaluation import RunConfig, run_suite

    opts = _load_config(args.config)
    agent = args.agent or opts.get("agent", "neural_slam")
    worlds = args.worlds or opts.get("worlds")
    generate = None
    if args.n is not None:
        generate, worlds = {"n": args.n, "size": args.size, "seed": args.seed or 0}, None
    cfg = RunConfig(agent=agent, checkpoint=args.checkpoint or opts.get("checkpoint"), worlds=worlds,
                    generate=generate, seed=args.seed if args.seed is not None else opts.get("seed", 0),
                    step_cap=args.step_cap)
    report = run_suite(cfg)
    print("agent        steps              reward             success")
    print(report.table_line(agent))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
    return EXIT_OK


def cmd_gen_worlds(args) -> int:
    from .evaluation import generate_world_set

    opts = {"n": 50, "size": 16, "seed": 7, "density": 0.2, **_load_config(args.config)}
    for key in ("n", "size", "seed", "density"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    ws = generate_world_set(int(opts["n"]), int(opts["size"]), int(opts["seed"]), args.out,
                            density=float(opts["density"]))
    print(f"wrote {len(ws)} worlds to {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .env import load_world
    from .evaluation import load_agent, replay_render

    params = load_agent(args.agent or "neural_slam", args.checkpoint)
    world = load_world(args.world)
    frames = replay_render(params, world, args.out or "replay", seed=args.seed or 0,
                           step_cap=args.step_cap, images=not args.no_images)
    print(f"wrote {len(frames)} frames to {args.out or 'replay'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_battery

    results = run_battery(args.scale, args.tolerance, faults=set(args.inject_fault), seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "suite": cmd_suite, "gen-worlds": cmd_gen_worlds,
            "replay": cmd_replay, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SETUP


if __name__ == "__main__":
    sys.exit(main())
