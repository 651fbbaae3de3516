"""Command line: train, eval, probe, ot-demo and plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="achdistill", description="PPO with achievement distillation on gridworld achievement tasks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir", type=Path)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config key, e.g. distill.use_match=false (repeatable)")

    e = sub.add_parser("eval", help="success rates and score of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=10_000)
    e.add_argument("--json", type=Path, help="also write the report here")

    pr = sub.add_parser("probe", help="linear next-achievement probe on frozen latents")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--episodes", type=int, default=200)
    pr.add_argument("--policy", choices=("expert", "random", "agent"), default="expert")
    pr.add_argument("--n-train", type=int, default=50_000)
    pr.add_argument("--n-test", type=int, default=10_000)
    pr.add_argument("--epochs", type=int, default=500)
    pr.add_argument("--learning-rate", type=float, default=1e-3)
    pr.add_argument("--seed", type=int, default=20_000)
    pr.add_argument("--json", type=Path)

    o = sub.add_parser("ot-demo", help="match the achievements of two recorded episodes")
    o.add_argument("source", type=Path, help="episode recording (JSON)")
    o.add_argument("target", type=Path)
    o.add_argument("--checkpoint", type=Path, help="encoder to use (default: freshly initialised)")
    o.add_argument("--profile", default="desk_small", help="profile of the fresh encoder")
    o.add_argument("--alpha", type=float, default=0.05)
    o.add_argument("--json", type=Path)

    pl = sub.add_parser("plot", help="tables and curves from a metrics file")
    pl.add_argument("metrics", type=Path)
    pl.add_argument("--out", type=Path, help="output directory (default: next to the metrics file)")
    return p


def _emit(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, default=_jsonable)
    print(text)
    if path is not None:
        path.write_text(text + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _format_table(M: np.ndarray, rows, cols) -> str:
    head = "      " + "".join(f"{c:>9}" for c in cols)
    lines = [head] + [f"{r:>6}" + "".join(f"{v:9.4f}" for v in M[i]) for i, r in enumerate(rows)]
    return "\n".join(lines)


def cmd_train(args) -> int:
    from .config import RunConfig
    from .harness import train

    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is not None:
        config = RunConfig.load(args.config, overrides)
    else:
        config = RunConfig().with_overrides(overrides)
    res = train(config, args.output_dir)
    _emit({
        "output_dir": str(res.output_dir),
        "metrics": str(res.metrics_path),
        "checkpoint": str(res.checkpoint_path),
        "config_hash": res.config_hash,
        "env_steps": res.env_steps,
        "phases": res.phases,
        "score": None if res.final_row is None else res.final_row["score"],
        "trailing_score": None if res.final_row is None else res.final_row["trailing_score"],
    }, None)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate

    _emit(evaluate(args.checkpoint, args.episodes, args.seed), args.json)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .harness import probe

    r = probe(args.checkpoint, args.episodes, args.policy, args.n_train, args.n_test, args.epochs,
              args.learning_rate, args.seed)
    _emit(r.as_dict(), args.json)
    return EXIT_OK


def cmd_ot_demo(args) -> int:
    from .envs import make_env
    from .harness import load_agent, load_recording_trajectory, match_episodes
    from .policy_net import AgentNet

    src, rec = load_recording_trajectory(args.source)
    tgt, _ = load_recording_trajectory(args.target)
    if args.checkpoint is not None:
        net, _, _ = load_agent(args.checkpoint)
    else:
        env = make_env(rec.env_id, **rec.env_params)
        net = AgentNet(env.observation_shape, env.n_actions, args.profile, seed=0)
        print(f"no checkpoint given: using an untrained {args.profile} encoder", file=sys.stderr)
    res = match_episodes(net, src, tgt, args.alpha)
    names = list(rec.graph.vertices)
    label = lambda i: names[i] if 0 <= i < len(names) else str(i)  # noqa: E731
    s_lab = [label(i) for i in res["source_achievements"]]
    t_lab = [label(i) for i in res["target_achievements"]]
    if res["cost"].size:
        print("cost")
        print(_format_table(res["cost"], [f"g{i}" for i in range(len(s_lab))], [f"g'{k}" for k in range(len(t_lab))]))
        print("plan")
        print(_format_table(res["plan"], [f"g{i}" for i in range(len(s_lab))], [f"g'{k}" for k in range(len(t_lab))]))
    print("matching")
    for i, k in res["matching"]:
        print(f"  g{i} ({s_lab[i]}) -> g'{k} ({t_lab[k]})")
    report = {
        "source": s_lab,
        "target": t_lab,
        "cost": res["cost"],
        "plan": res["plan"],
        "matching": [list(p) for p in res["matching"]],
        "hungarian": [list(p) for p in res["hungarian"]],
        "label_matching": [list(p) for p in res["label_matching"]],
        "converged": res["converged"],
        "residual": res["residual"],
    }
    if args.json is not None:
        args.json.write_text(json.dumps(report, indent=2, default=_jsonable) + "\n")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_metrics

    out = args.out if args.out is not None else args.metrics.parent / "plots"
    paths = plot_metrics(args.metrics, out)
    _emit({k: str(v) for k, v in paths.items()}, None)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "ot-demo": cmd_ot_demo, "plot": cmd_plot}


def main(argv=None) -> int:
    from .config import ConfigError
    from .harness import TrainingAborted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"achdistill: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"achdistill: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"achdistill: {e}; diagnostics in {e.path}", file=sys.stderr)
        return EXIT_ABORT
    except Exception as e:
        print(f"achdistill: aborted: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
