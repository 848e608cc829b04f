"""
amplification-lab command line.

    python amplification_lab.py generate --task teaser --n 400 --seed 1 --out task.csv
    python amplification_lab.py audit --config experiment.yaml --runs 10
    python amplification_lab.py amplify --tasks 8 --runs 2 --quick
    python amplification_lab.py sweep --variable width --grid 16,32,64
    python amplification_lab.py mitigate --strategy oversample --weight 2
    python amplification_lab.py pairwise
    python amplification_lab.py report --from runs/audit-0123abcd4567

Progress goes to standard error; `--json` writes the report to standard output.
Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical failure.
"""

import argparse
import logging
import os
import sys
from typing import List, NoReturn, Optional, Sequence

import orjson

from amplification_harness import (
    MitigationStrategy,
    amplification_sweep,
    audit,
    derive_seed,
    design_sweep,
    load_task_dataset,
    mitigation_experiment,
    mitigation_inputs,
    pairwise_dataset,
    pairwise_difficulty_experiment,
    task_sampler_for,
)
from grouped_datasets import stratified_split
from lab_config import ExperimentConfig, config_hash, lab_settings, resolve_config
from lab_errors import LabError, ReportIOError, UsageError, exit_code_for
from lab_reports import JSON_OPTIONS, LabResults, TrainingSummary, emit_report, load_results, run_directory
from mlp_network import init_mlp, train

logger = logging.getLogger("amplification-lab")

MODEL_FILE = "model.npz"


class LabArgumentParser(argparse.ArgumentParser):
    """Reports bad arguments as a UsageError instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override a config key (repeatable; value parsed as YAML)")
    parser.add_argument("--quick", action="store_true", help="Small smoke-test preset (not a faithful reproduction)")
    parser.add_argument("--json", action="store_true", help="Print the report JSON to standard output")
    parser.add_argument("--out", help="Run directory (CSV file for generate)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    parser.add_argument("--seed", type=int, help="Root seed (also seeds the task generator)")
    parser.add_argument("--runs", type=int, help="Models per condition")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--jobs", type=int, help="Parallel training jobs")
    parser.add_argument("--task", choices=["teaser", "twin", "blobs"], help="Generated task family")
    parser.add_argument("--n", type=int, help="Rows of the generated task")
    parser.add_argument("--frequency", type=float, help="Boundary frequency of the complex group")
    parser.add_argument("--noise", type=float, help="Label-flip rate")
    parser.add_argument("--margin", type=float)
    parser.add_argument("--images", help="IDX image file (switches the task source to idx)")
    parser.add_argument("--labels", help="IDX label file")


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog="amplification-lab", description="Difficulty amplification experiments")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    for name, summary in (("generate", "Write a generated task as CSV"),
                          ("train", "Train one model on the task and save it"),
                          ("audit", "Two-stage disparity audit"),
                          ("pairwise", "Pairwise class difficulty across architectures")):
        _add_common(commands.add_parser(name, help=summary))

    amplify = commands.add_parser("amplify", help="Amplification factor over sampled tasks")
    _add_common(amplify)
    amplify.add_argument("--tasks", type=int, help="Number of sampled tasks")

    sweep = commands.add_parser("sweep", help="Amplification factor across one design decision")
    _add_common(sweep)
    sweep.add_argument("--tasks", type=int)
    sweep.add_argument("--variable", choices=["width", "step", "weight_decay", "grad_penalty_c"])
    sweep.add_argument("--grid", help="Comma-separated, strictly increasing values")

    mitigate = commands.add_parser("mitigate", help="Before/after audit of a mitigation strategy")
    _add_common(mitigate)
    mitigate.add_argument("--strategy", choices=["add_data", "oversample"])
    mitigate.add_argument("--target-group", type=int)
    mitigate.add_argument("--factor", type=float, help="Target-group growth factor (add_data)")
    mitigate.add_argument("--weight", type=float, help="Target-group sampling weight (oversample)")

    report = commands.add_parser("report", help="Rewrite the tables of an existing run directory")
    report.add_argument("--from", dest="source", required=True, help="Run directory holding report.json")
    report.add_argument("--out", help="Destination directory (defaults to --from)")
    report.add_argument("--json", action="store_true")
    report.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    """Named flags as section.key=value overrides; applied after --set."""
    mapping = [
        ("seed", ["seed", "task.generator.seed"]),
        ("runs", ["protocol.n_runs"]),
        ("epochs", ["train.epochs"]),
        ("jobs", ["protocol.jobs"]),
        ("tasks", ["sweep.m_tasks"]),
        ("task", ["task.generator.generator"]),
        ("n", ["task.generator.n"]),
        ("frequency", ["task.generator.frequency"]),
        ("noise", ["task.generator.noise"]),
        ("margin", ["task.generator.margin"]),
        ("variable", ["sweep.variable"]),
        ("strategy", ["mitigation.strategy"]),
        ("target_group", ["mitigation.target_group"]),
        ("factor", ["mitigation.factor"]),
        ("weight", ["mitigation.weight"]),
        ("images", ["task.images_path"]),
        ("labels", ["task.labels_path"]),
    ]
    overrides = []
    for flag, keys in mapping:
        value = getattr(args, flag, None)
        if value is not None:
            overrides.extend(f"{key}={value}" for key in keys)
    if getattr(args, "task", None):
        overrides.append("task.kind=generator")
    if getattr(args, "images", None) or getattr(args, "labels", None):
        overrides.append("task.kind=idx")
    if getattr(args, "grid", None):
        try:
            values = [float(value) for value in args.grid.split(",") if value.strip()]
        except ValueError as e:
            raise UsageError(f"--grid must be comma-separated numbers, got '{args.grid}'") from e
        overrides.append(f"sweep.grid=[{', '.join(repr(value) for value in values)}]")
    return overrides


def _configure_logging(verbose: int) -> None:
    level = {0: lab_settings().log_level, 1: "INFO"}.get(verbose, "DEBUG")
    logging.basicConfig(stream=sys.stderr, level=level, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _input_files(config: ExperimentConfig, args: argparse.Namespace) -> List[str]:
    files = [args.config] if getattr(args, "config", None) else []
    files += [path for path in (config.task.path, config.task.images_path, config.task.labels_path) if path]
    return files


def run_generate(config: ExperimentConfig, digest: str, out: Optional[str]) -> LabResults:
    dataset = load_task_dataset(config)
    path = out or os.path.join(run_directory(config, "generate", digest), "task.csv")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        dataset.save_csv(path)
    except OSError as e:
        raise ReportIOError(f"Cannot write task ({e.strerror})", e.filename or path) from e
    print(f"task: {path}", file=sys.stderr)
    return LabResults(command="generate", config_hash=digest, config=config.model_dump(mode="json"))


def run_train(config: ExperimentConfig, results: LabResults, out_dir: str) -> LabResults:
    dataset = load_task_dataset(config)
    train_set, test_set = stratified_split(dataset, config.test_fraction, derive_seed(config.seed, "train/split", 0))
    spec = config.model.build(dataset.n_features, max(2, dataset.num_classes))
    seed = derive_seed(config.seed, "train", 0)
    model, curve = train(init_mlp(spec, seed), train_set, test_set, None, config.train.model_copy(update={"seed": seed}))
    try:
        os.makedirs(out_dir, exist_ok=True)
        model.save(os.path.join(out_dir, MODEL_FILE))
    except OSError as e:
        raise ReportIOError(f"Cannot write model ({e.strerror})", e.filename or out_dir) from e
    results.training = TrainingSummary(spec=spec, seed=seed, curve=curve, model_path=MODEL_FILE)
    return results


def run_command(command: str, config: ExperimentConfig, results: LabResults, out_dir: str) -> LabResults:
    """Bind one subcommand to its harness operation."""
    if command == "train":
        return run_train(config, results, out_dir)
    if command == "audit":
        results.audit = audit(load_task_dataset(config), config)
    elif command == "amplify":
        results.amplification = amplification_sweep(task_sampler_for(config), config.sweep.m_tasks, config)
    elif command == "sweep":
        results.sweep = design_sweep(config.sweep.variable, config.sweep.resolved_grid(), config,
                                     task_sampler_for(config), config.sweep.m_tasks)
    elif command == "mitigate":
        dataset, reserve = mitigation_inputs(config)
        settings = config.mitigation
        strategy = MitigationStrategy(kind=settings.strategy, target_group=settings.target_group,
                                      factor=settings.factor, weight=settings.weight)
        results.mitigation = mitigation_experiment(dataset, reserve, strategy, config)
    elif command == "pairwise":
        dataset = pairwise_dataset(config)
        specs = [model.build(dataset.n_features, dataset.num_classes) for model in config.pairwise.models]
        results.pairwise = pairwise_difficulty_experiment(dataset, specs, config)
    return results


def _emit(results: LabResults, out_dir: str, as_json: bool, inputs: Sequence[str] = ()) -> None:
    emit_report(results, out_dir, inputs)
    print(f"run-dir: {out_dir}", file=sys.stderr)
    if as_json:
        sys.stdout.write(orjson.dumps(results.model_dump(mode="json"), option=JSON_OPTIONS).decode())
        sys.stdout.write("\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0
    except LabError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return exit_code_for(e)

    try:
        _configure_logging(args.verbose)
        if args.command == "report":
            results = load_results(args.source)
            print(f"config-hash: {results.config_hash}", file=sys.stderr)
            _emit(results, args.out or args.source, args.json)
            return 0

        config = resolve_config(args.config, [*args.overrides, *_flag_overrides(args)], args.quick)
        digest = config_hash(config)
        print(f"config-hash: {digest}", file=sys.stderr)
        logger.info(f"Running {args.command} with {config.n_runs} runs per condition, {config.jobs()} jobs")

        if args.command == "generate":
            results = run_generate(config, digest, args.out)
            if args.json:
                sys.stdout.write(orjson.dumps(results.model_dump(mode="json"), option=JSON_OPTIONS).decode() + "\n")
            return 0

        out_dir = args.out or run_directory(config, args.command, digest)
        results = LabResults(command=args.command, config_hash=digest, config=config.model_dump(mode="json"))
        results = run_command(args.command, config, results, out_dir)
        _emit(results, out_dir, args.json, _input_files(config, args))
        return 0
    except LabError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
