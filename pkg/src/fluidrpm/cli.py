"""Command-line entry point: ``fluidrpm <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Experiment
outcomes (right or wrong answers) never change the exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ShapeError, UsageError
from .experiments import (
    GRID_RULES,
    condition_matrix,
    mean_by_distractor_count,
    run_extensive,
    run_naive_condition,
)
from .io import ConfigError, LoadError, RunConfig, load_test, parse_config, save_test, write_manifest, write_results
from .model import ModelParams, gradient_check, init
from .optim import TrainingDiverged
from .raster import ParameterError, encode_pgm
from .solver import SolveConfig, solve_naive, write_traces
from .testgen import FEATURES, FeatureName, GenerationError, SeqSpec, SpecError, check_invariants, generate_test

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fluidrpm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _features(text: str) -> list[FeatureName]:
    if not text or text == "none":
        return []
    try:
        return [FeatureName(s.strip()) for s in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_config_flags(p: argparse.ArgumentParser, steps: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--seed", type=int, help="seed (default: FLUIDRPM_SEED or 0)")
    p.add_argument("--t", type=int, help="tiles per sequence (default 5)")
    p.add_argument("--n", type=int, help="options per test (default 4)")
    p.add_argument("--sigma", type=float, help="dissimilarity scale (default 0.2)")
    p.add_argument("--lr", type=float, help="prediction and base learning rate (default 3e-4)")
    p.add_argument("--dis-ratio", type=float, help="dissimilarity lr as a fraction of --lr (default 0.7)")
    p.add_argument("--lr-bound", type=float, help="bound-loss learning rate (default 3e-4)")
    p.add_argument("--rho", type=float, help="RMSprop decay (default 0.9)")
    p.add_argument("--eps", type=float, help="RMSprop epsilon (default 1e-8)")
    if steps:
        p.add_argument("--steps", type=int, help="optimisation steps per test (default 200)")


def _config(args) -> RunConfig:
    keys = ("seed", "t", "n", "sigma", "lr", "dis_ratio", "lr_bound", "rho", "eps", "steps")
    return parse_config({k: getattr(args, k, None) for k in keys}, args.config)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fluidrpm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fluidrpm {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a test and store it as PGMs plus a manifest")
    _add_config_flags(p, steps=False)
    p.add_argument("--rule", type=FeatureName, default=FeatureName.COLOR, help="rule feature (color, size, number)")
    p.add_argument("--distractors", type=_features, default=[], help="comma-separated distractor features")
    p.add_argument("--hide-answer", action="store_true", help="omit the correct index from the manifest")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("render", help="render a stored test into one contact-sheet PGM")
    p.add_argument("test_dir", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output .pgm path")

    p = sub.add_parser("solve", help="solve a stored test with a fresh network")
    _add_config_flags(p)
    p.add_argument("test_dir", type=Path)
    p.add_argument("--traces-out", type=Path, help="write per-step losses and option errors as CSV")

    p = sub.add_parser("naive-grid", help="run the naive-network condition grid")
    _add_config_flags(p)
    p.add_argument("--rule", type=FeatureName, action="append", help="color and/or size (default both)")
    p.add_argument("--num-tests", type=int, default=100, help="tests per condition (default 100)")
    p.add_argument("--max-distractors", type=int, default=4, help="skip conditions with more distractors")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train-extensive", help="train one model on many easy sequences")
    _add_config_flags(p, steps=False)
    p.add_argument("--rule", type=FeatureName, default=FeatureName.COLOR)
    p.add_argument("--sequences", type=int, default=2000, help="training sequences (default 2000)")
    p.add_argument("--steps-per-sequence", type=int, default=2)
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--test-set-size", type=int, default=50)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("inspect", help="describe a stored test or a checkpoint")
    p.add_argument("path", type=Path, nargs="?", help="test directory or checkpoint file (omit for the architecture)")

    p = sub.add_parser("selftest", help="gradient check, generator invariants and a traced solve")
    _add_config_flags(p, steps=False)
    p.add_argument("--steps", type=int, default=20, help="steps of the traced solve (default 20)")
    p.add_argument("--coords", type=int, default=20, help="gradient-check coordinates (default 20)")
    p.add_argument("--tests", type=int, default=200, help="generated tests to validate (default 200)")
    p.add_argument("--out", type=Path, required=True, help="output directory for traces.csv")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    spec = SeqSpec.with_distractors(args.rule, args.distractors, t=cfg.t, n=cfg.n, seed=cfg.seed)
    test = generate_test(spec)
    manifest = save_test(test, args.out, hide_answer=args.hide_answer)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_render(args) -> int:
    test = load_test(args.test_dir)
    tiles, options = test.tile_canvases, test.option_canvases
    width = max(len(tiles), len(options))
    gap = 4
    size = tiles.shape[1]
    sheet = np.full((2 * size + gap, width * (size + gap) - gap), 0.5, dtype=np.float32)
    for row, stack in enumerate((tiles, options)):
        for k, canvas in enumerate(stack):
            r0, c0 = row * (size + gap), k * (size + gap)
            sheet[r0 : r0 + size, c0 : c0 + size] = canvas
    args.out.write_bytes(encode_pgm(sheet))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    test = load_test(args.test_dir)
    result = solve_naive(test, SolveConfig(cfg.steps, args.traces_out is not None, cfg.seed, cfg.train_config()))
    if result.failed:
        print(f"failed: {result.diagnostic}")
    else:
        verdict = "unknown" if result.correct is None else ("correct" if result.correct else "wrong")
        print(f"choice {result.choice} ({verdict})")
        print("errors " + " ".join(f"{e:.6g}" for e in result.final_errors))
    if args.traces_out is not None:
        write_traces(args.traces_out, result)
        write_manifest(args.traces_out.with_suffix(".manifest.json"), "solve", cfg.as_dict(), [args.traces_out])
    return EXIT_OK


GRID_COLUMNS = ("rule", "distractors", "num_distractors", "test", "seed", "correct_index", "choice", "correct", "failed", "first_separation_step")
CONDITION_COLUMNS = ("rule", "distractors", "num_distractors", "num_tests", "successes", "success_rate", "sem", "failures")


def cmd_naive_grid(args) -> int:
    cfg = _config(args)
    rules = args.rule or list(GRID_RULES)
    args.out.mkdir(parents=True, exist_ok=True)
    solve_cfg = SolveConfig(cfg.steps, True, cfg.seed, cfg.train_config())
    per_test, per_cond, results = [], [], []
    base = cfg.seed
    for rule in rules:
        for cond in condition_matrix(rule, cfg.t, cfg.n):
            if len(cond.distractors) > args.max_distractors:
                continue
            res = run_naive_condition(cond, args.num_tests, base, solve_cfg, workers=args.workers)
            base += args.num_tests
            results.append(res)
            names = "+".join(f.value for f in FEATURES if f in cond.distractors) or "none"
            common = {"rule": cond.rule_feature.value, "distractors": names, "num_distractors": len(cond.distractors)}
            per_test += [{**common, **dataclasses.asdict(rec), "test": rec.index} for rec in res.records]
            per_cond.append({**common, "num_tests": res.num_tests, "successes": res.successes,
                             "success_rate": res.success_rate, "sem": res.sem, "failures": res.failures})
            print(f"{cond.label}: {res.successes}/{res.num_tests} (sem {res.sem:.3f})")
    total = sum(r.successes for r in results)
    count = sum(r.num_tests for r in results)
    tests_csv = write_results(per_test, args.out / "tests.csv", GRID_COLUMNS,
                              summary={"rule": "all", "test": count, "correct": total})
    cond_csv = write_results(per_cond, args.out / "conditions.csv", CONDITION_COLUMNS)
    by_count = [
        {"rule": rule.value, "num_distractors": k, "success_rate": v}
        for rule in rules
        for k, v in mean_by_distractor_count(r for r in results if r.condition.rule_feature is FeatureName(rule)).items()
    ]
    count_csv = write_results(by_count, args.out / "by_distractor_count.csv", ("rule", "num_distractors", "success_rate"))
    write_manifest(args.out / "manifest.json", "naive-grid", cfg.as_dict(), [tests_csv, cond_csv, count_csv],
                   extra={"rules": [FeatureName(r).value for r in rules], "num_tests": args.num_tests,
                          "max_distractors": args.max_distractors, "seeds": f"{cfg.seed}..{base - 1}"})
    return EXIT_OK


def cmd_train_extensive(args) -> int:
    cfg = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    curve, params = run_extensive(
        args.rule, args.sequences, args.steps_per_sequence, args.eval_every, args.test_set_size,
        seed=cfg.seed, train=cfg.train_config(), t=cfg.t, n=cfg.n,
        progress=lambda k, acc: print(f"{k} sequences: accuracy {acc:.3f}", flush=True),
    )
    curve_csv = write_results(
        [{"sequences_trained": k, "accuracy": a} for k, a in curve.points],
        args.out / "curve.csv", ("sequences_trained", "accuracy"),
    )
    ckpt = args.out / "model.ckpt"
    params.save(ckpt)
    write_manifest(args.out / "manifest.json", "train-extensive", cfg.as_dict(), [curve_csv, ckpt],
                   extra={"rule": curve.rule.value, "sequences": args.sequences,
                          "steps_per_sequence": args.steps_per_sequence, "eval_every": args.eval_every,
                          "test_set_size": args.test_set_size, "init_seed": curve.init_seed,
                          "train_seed": curve.train_seed, "eval_seed": curve.eval_seed})
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.path is None:
        params = init(0)
        for name, count in params.layer_counts():
            print(f"{name:14s} {count:>9d}")
        print(f"{'total':14s} {params.num_parameters():>9d}")
        return EXIT_OK
    if args.path.is_dir():
        test = load_test(args.path)
        spec = test.spec
        print(f"t={spec.t} n={spec.n} rule={spec.rule.value} distractors={','.join(f.value for f in spec.distractors) or 'none'}")
        for label, descs in (("tile", test.tiles), ("option", test.options)):
            for k, d in enumerate(descs):
                mark = " *" if label == "option" and k == test.correct else ""
                print(f"{label} {k}: color={d.color:.4g} size={d.size:.4g} shape={d.shape.value} number={d.number} positions={d.positions}{mark}")
        return EXIT_OK
    params = ModelParams.load(args.path)
    print(f"parameters {params.num_parameters()} sha256 {params.checksum()}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    cfg = _config(args)
    ok = True
    rng = np.random.default_rng(cfg.seed)
    params = init(cfg.seed, dtype=np.float64)
    report = gradient_check(params, rng.uniform(0.0, 1.0, (100, 100)), args.coords, rng)
    grad_ok = report.max_rel_error < 1e-6
    ok &= grad_ok
    print(f"gradient check: {len(report.coords)} coords, max rel err {report.max_rel_error:.3g} "
          f"({len(report.rejected)} kink-crossing draws skipped) {'ok' if grad_ok else 'FAIL'}")

    bad = 0
    rules = [FeatureName.COLOR, FeatureName.SIZE, FeatureName.NUMBER]
    for i in range(args.tests):
        rule = rules[i % len(rules)]
        others = [f for f in FEATURES if f is not rule]
        mask = int(rng.integers(1 << len(others)))
        ds = [f for b, f in enumerate(others) if mask >> b & 1]
        problems = check_invariants(generate_test(SeqSpec.with_distractors(rule, ds, t=cfg.t, n=cfg.n, seed=cfg.seed + i)))
        bad += bool(problems)
    ok &= bad == 0
    print(f"generator invariants: {args.tests - bad}/{args.tests} valid {'ok' if bad == 0 else 'FAIL'}")

    args.out.mkdir(parents=True, exist_ok=True)
    test = generate_test(SeqSpec.easy(FeatureName.COLOR, t=cfg.t, n=cfg.n, seed=cfg.seed))
    result = solve_naive(test, SolveConfig(cfg.steps, True, cfg.seed, cfg.train_config()))
    traces = args.out / "traces.csv"
    write_traces(traces, result)
    write_manifest(args.out / "manifest.json", "selftest", cfg.as_dict(), [traces])
    print(f"traced solve: {cfg.steps} steps, choice {result.choice}, wrote {traces}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "gen": cmd_gen,
    "render": cmd_render,
    "solve": cmd_solve,
    "naive-grid": cmd_naive_grid,
    "train-extensive": cmd_train_extensive,
    "inspect": cmd_inspect,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, SpecError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, GenerationError, TrainingDiverged, ShapeError, ParameterError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
