"""``sfrl`` command-line tool: gen -> score -> filter -> train -> eval -> report.

Exit codes: 0 success, 1 data/validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .dataset import DatasetError, dataset_to_text, load_dataset
from .envs import MixSpec, describe_env_params, generate_dataset, make_env, make_env_from_id
from .evaluation import COLUMNS, EvalConfig, ExperimentPlan, load_plan, rollout_return, run_experiment, results_to_text
from .filtering import (
    ABSOLUTE_POWER,
    AVERAGE_DISCOUNTED,
    AVERAGE_REWARD,
    RELATIVE_POWER,
    DegenerateDatasetError,
    ScoreCriterion,
    apply_filter,
    partition,
    report_to_text,
)
from .learners import ALGORITHMS, LearnerConfig, load_model, model_to_text, train
from .mmd import policy_divergence_report

log = logging.getLogger("sfrl")


class DataError(Exception):
    """Input data problem; reported on stderr with exit code 1."""


def _commit(outputs: dict) -> None:
    """Write every output to a temp file first, then rename them all into place."""
    staged = []
    try:
        for path, text in outputs.items():
            path = Path(path)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def _mix(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    try:
        weights = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"mix must be R,M,E numbers, got {text!r}") from None
    if len(weights) != 3 or min(weights) < 0 or sum(weights) <= 0:
        raise argparse.ArgumentTypeError("mix must be three non-negative numbers, not all zero")
    return weights


def _criterion(args) -> ScoreCriterion:
    return ScoreCriterion(args.criterion, args.gamma, args.mode)


def _load(path) -> object:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> None:
    params = dict(args.param or [])
    m = make_env(args.env, **params)
    mix = MixSpec.from_weights(args.mix, args.episodes, shuffle_seed=args.seed)
    d = generate_dataset(m, mix, args.seed, args.epsilon, args.medium_fraction, args.gamma)
    _commit({args.out: dataset_to_text(d)})
    log.info("wrote %d episodes / %d transitions to %s", len(d), d.n_transitions, args.out)


def _score_and_report(args):
    d = _load(args.input)
    if len(d) == 0:
        raise DataError(f"{args.input}: dataset has no episodes to score")
    report = partition(d, _criterion(args))
    return d, report


def _print_summary(report) -> None:
    c = report.criterion
    print(
        f"criterion={c.kind} mode={c.mode} gamma={c.gamma!r} "
        f"episodes={len(report.per_episode)} mean={report.dataset_mean!r} "
        f"superior={len(report.superior_indices)} "
        f"retained_transitions={report.retained_transition_count}/{report.original_transition_count}"
    )


def cmd_score(args) -> None:
    _, report = _score_and_report(args)
    if args.report:
        _commit({args.report: report_to_text(report)})
    _print_summary(report)


def cmd_filter(args) -> None:
    d, report = _score_and_report(args)
    filtered = apply_filter(d, report)
    outputs = {args.out: dataset_to_text(filtered)}
    if args.report:
        outputs[args.report] = report_to_text(report)
    _commit(outputs)
    _print_summary(report)


def cmd_train(args) -> None:
    d = _load(args.data)
    cfg = LearnerConfig(
        algorithm=args.algo,
        gamma=args.gamma,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        alpha=args.alpha,
        expectile_tau=args.tau,
        awr_temperature=args.temperature,
        seed=args.seed,
    )
    model = train(d, cfg)
    _commit({args.out: model_to_text(model)})
    log.info("trained %s for %d sweeps (converged=%s)", cfg.algorithm, model.epochs_run, model.converged)


def cmd_eval(args) -> None:
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        raise DataError(f"{args.model}: no such file") from None
    env_id = args.env or model.env_id
    try:
        m = make_env_from_id(env_id)
    except ValueError as exc:
        raise DataError(f"{args.model}: cannot rebuild environment {env_id!r} ({exc}); pass --env") from None
    if m.n_states != model.q_table.shape[0] or m.n_actions != model.q_table.shape[1]:
        raise DataError(f"{args.model}: model shape does not match environment {env_id}")
    res = rollout_return(m, model, EvalConfig(args.episodes, args.gamma_eval, args.seed))
    div = policy_divergence_report(model, model.behavior, sigma=args.mmd_sigma, seed=args.seed)
    out = {
        "model": str(args.model),
        "algorithm": model.algorithm,
        "env": m.env_id,
        "episodes": args.episodes,
        "gamma_eval": args.gamma_eval,
        "gamma_train": model.config.gamma,
        "seed": args.seed,
        "mean_return": res.mean,
        "std_return": res.std,
        "fallback_steps": res.fallback_steps,
        "mmd2_vs_behavior": div.aggregate,
    }
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        _commit({args.out: text})
    sys.stdout.write(text)


def cmd_report(args) -> None:
    if args.plan:
        try:
            plan = load_plan(args.plan)
        except FileNotFoundError:
            raise DataError(f"{args.plan}: no such file") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{args.plan}: bad plan file ({exc})") from None
    else:
        plan = ExperimentPlan()
    table = run_experiment(plan)
    _commit({args.out: results_to_text(table)})
    log.info("wrote %d rows to %s", len(table.rows), args.out)


# -- parser -------------------------------------------------------------------

CSV_HELP = (
    "CSV columns: " + ",".join(COLUMNS) + ". Line 1 is a '# sfrl results v1' comment carrying "
    "env, gamma_train, gamma_eval and budget; a '#summary' line introduces per-(algorithm, "
    "criterion) means at the final checkpoint. See FORMATS.md."
)


def _add_criterion_flags(p) -> None:
    p.add_argument("--criterion", choices=(AVERAGE_REWARD, AVERAGE_DISCOUNTED), default=AVERAGE_DISCOUNTED)
    p.add_argument("--mode", choices=(ABSOLUTE_POWER, RELATIVE_POWER), default=ABSOLUTE_POWER,
                   help="discount exponent: absolute step index h or h - j (default absolute)")
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--in", dest="input", required=True, help="input ORLD v1 dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfrl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"sfrl {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--deterministic", action="store_true", default=True,
                        help="always on; accepted for forward compatibility")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a mixed-quality dataset",
                       epilog="environment parameters:\n" + describe_env_params(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--env", required=True, choices=("gridworld", "cliff", "chain"))
    p.add_argument("-p", "--param", type=_key_value, action="append", metavar="KEY=VALUE")
    p.add_argument("--mix", type=_mix, default=(50.0, 30.0, 20.0), metavar="R,M,E")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--medium-fraction", type=float, default=0.3)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("score", help="score episodes and report the dataset mean")
    _add_criterion_flags(p)
    p.add_argument("--report")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="keep only episodes scoring above the mean")
    _add_criterion_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="train a tabular offline learner")
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--alpha", type=float, default=2.5)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--temperature", type=float, default=3.0)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--env", help="environment id (default: the one recorded in the model)")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--gamma-eval", type=float, default=1.0)
    p.add_argument("--mmd-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="run an experiment plan and write the results CSV", epilog=CSV_HELP)
    p.add_argument("--plan", help="JSON plan file (default: the built-in default plan)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except DegenerateDatasetError as exc:
        print(f"error: {getattr(args, 'input', '')}: {exc}", file=sys.stderr)
        return 1
    except (DataError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
