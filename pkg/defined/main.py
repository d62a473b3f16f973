"""
Command-line entry point: train, eval, theory, describe and compare.

Options can also come from a flat key=value file passed with --config; keys
are the long flag names without dashes (``snr=30``, ``snr-lo=10``). Values
from the file become defaults, so flags given on the command line win.
"""

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import structlog
import torch
from dotenv import dotenv_values
from pydantic import ValidationError

from defined import __version__
from defined.config.logging_config import setup_logging
from defined.config.run_configs import (
    CurriculumConfig,
    EvalConfig,
    ModelConfig,
    TheoryConfig,
    TrainConfig,
)
from defined.config.settings import Settings
from defined.core.evaluation_manager import EvaluationManager
from defined.core.theory_lab import TheoryLab, loglog_slope
from defined.core.training_manager import TrainingManager
from defined.data.models import EvalMethod, Fading, Modulation, RunManifest, TrainPhase
from defined.data.repositories import (
    CheckpointRepository,
    CurveRepository,
    ManifestRepository,
    TraceRepository,
)
from defined.errors import ConfigurationError, DefinedError, TrainingDivergedError
from defined.ui.reports import format_curve_summary, format_model_description, format_training_summary

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MODULATIONS = [m.value for m in Modulation]
FADINGS = [f.value for f in Fading]


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    """Top-level parser plus the parser of each subcommand"""

    parser = argparse.ArgumentParser(
        prog="defined",
        description="Decision-feedback in-context detection workbench",
        epilog="--config FILE reads flat key=value lines (flag names as keys); command-line flags win.",
    )
    parser.add_argument("--config", metavar="FILE", help="key=value file with option defaults")
    parser.add_argument("--version", action="version", version=__version__)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    channel = argparse.ArgumentParser(add_help=False)
    channel.add_argument("--mod", choices=MODULATIONS, help="modulation (required)")
    channel.add_argument("--n-t", type=int, help="transmit antennas")
    channel.add_argument("--n-r", type=int, help="receive antennas")
    channel.add_argument("--fading", choices=FADINGS)
    channel.add_argument("--kappa", type=float, help="Rician factor")
    channel.add_argument("--T", type=int, help="frame length in pairs")
    channel.add_argument("--seed", type=int)

    subparsers = parser.add_subparsers(dest="command", required=True)
    commands = {}

    train = subparsers.add_parser("train", parents=[common, channel], help="train a detector")
    train.add_argument("--phase", choices=[p.value for p in TrainPhase])
    train.add_argument("--snr-lo", type=float, help="lowest training SNR (dB)")
    train.add_argument("--snr-hi", type=float, help="highest training SNR (dB)")
    train.add_argument("--alpha", type=float, help="weight of the decision-feedback loss")
    train.add_argument("--batch", type=int, help="frames per step")
    train.add_argument("--steps", type=int, help="step budget for each phase")
    train.add_argument("--pretrain-steps", type=int)
    train.add_argument("--finetune-steps", type=int)
    train.add_argument("--epoch-steps", type=int, help="steps per epoch")
    train.add_argument("--lr", type=float, help="learning rate")
    train.add_argument("--warmup", type=int, help="linear warm-up steps")
    train.add_argument("--no-curriculum", action="store_true", help="train at full length from the start")
    train.add_argument("--T-start", type=int)
    train.add_argument("--T-step", type=int)
    train.add_argument("--epochs-per-stage", type=int)
    train.add_argument("--plateau-tolerance", type=float)
    train.add_argument("--df-refresh", type=int, help="steps between snapshot refreshes")
    train.add_argument("--k-df", type=_int_list, help="pilot counts drawn for decision-feedback prompts")
    train.add_argument("--d-e", type=int)
    train.add_argument("--layers", type=int)
    train.add_argument("--heads", type=int)
    train.add_argument("--d-ff", type=int)
    train.add_argument("--log-every", type=int)
    train.add_argument("--init", metavar="PATH", help="checkpoint to continue from")
    train.add_argument("--ckpt", metavar="PATH", help="checkpoint to write")
    train.add_argument("--trace", metavar="PATH", help="loss trace CSV to write")
    commands["train"] = train

    evaluate = subparsers.add_parser("eval", parents=[common, channel], help="SER curve of one method")
    evaluate.add_argument("--method", choices=[m.value for m in EvalMethod], required=True)
    evaluate.add_argument("--snr", type=float, help="test SNR (dB)")
    evaluate.add_argument("--pilots", type=int, help="pilot count k")
    evaluate.add_argument("--prompts", type=int, help="number of frames")
    evaluate.add_argument("--ckpt", metavar="PATH", help="checkpoint for model-based methods")
    evaluate.add_argument("--oracle-feedback", action="store_true", help="feed back true symbols")
    evaluate.add_argument("--mlsd-max-T", type=int, help="MLSD length cap")
    evaluate.add_argument("--out", metavar="PATH", help="curve CSV to write")
    commands["eval"] = evaluate

    theory = subparsers.add_parser("theory", parents=[common], help="linear-transformer checks")
    theory.add_argument("which", choices=["thm1", "thm2"])
    theory.add_argument("--d", type=int, help="feature dimension")
    theory.add_argument("--k-grid", type=_int_list)
    theory.add_argument("--trials", type=int)
    theory.add_argument("--sigma2", type=float, help="test covariance scale")
    theory.add_argument("--xi2", type=float, help="training covariance scale (thm2)")
    theory.add_argument("--query", type=_float_list, help="fixed query vector (thm1)")
    theory.add_argument("--seed", type=int)
    theory.add_argument("--out", metavar="PATH")
    commands["theory"] = theory

    describe = subparsers.add_parser("describe", parents=[common], help="print checkpoint config")
    describe.add_argument("--ckpt", metavar="PATH", required=True)
    commands["describe"] = describe

    compare = subparsers.add_parser("compare", parents=[common], help="join curve CSVs")
    compare.add_argument("curves", nargs="+", metavar="CURVE")
    compare.add_argument("--labels", help="comma-separated column labels")
    compare.add_argument("--out", metavar="PATH")
    commands["compare"] = compare

    return parser, commands


def _split_config(argv: Sequence[str]) -> Tuple[Optional[str], List[str]]:
    """Pull --config out of argv wherever it appears"""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)

    rest = []
    skip = False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--config":
            skip = True
            continue
        if token.startswith("--config="):
            continue
        rest.append(token)
    return known.config, rest


def _parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off", ""):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def apply_config_file(path: str, subparser: argparse.ArgumentParser):
    """
    Install key=value pairs from a config file as subcommand defaults

    Raises:
        ConfigurationError: unreadable file or a key that is not an option
    """
    if not Path(path).is_file():
        raise ConfigurationError(f"config file not found: {path}")

    actions = {action.dest: action for action in subparser._actions if action.option_strings}
    defaults = {}
    for key, value in dotenv_values(path).items():
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest not in actions or dest == "help":
            raise ConfigurationError(f"unknown config key: {key}")
        if value is None:
            raise ConfigurationError(f"config key {key} has no value")
        if actions[dest].choices is not None and value not in actions[dest].choices:
            raise ConfigurationError(f"config key {key}: {value!r} is not one of {list(actions[dest].choices)}")
        # flags take no argument, so their string defaults are not converted by argparse
        defaults[dest] = _parse_bool(value) if actions[dest].nargs == 0 else value
    subparser.set_defaults(**defaults)
    logger.info("config_file_applied", path=path, keys=sorted(defaults))


def _given(**values) -> Dict[str, Any]:
    return {key: value for key, value in values.items() if value is not None}


def build_train_config(args, settings: Settings) -> TrainConfig:
    if args.mod not in settings.snr_ranges_db:
        raise ConfigurationError(f"no training SNR range configured for {args.mod}")
    lo, hi = settings.snr_ranges_db[args.mod]
    model = ModelConfig(
        **_given(
            scheme=args.mod,
            n_t=args.n_t,
            n_r=args.n_r,
            d_e=args.d_e,
            n_layers=args.layers,
            n_heads=args.heads,
            d_ff=args.d_ff,
        )
    )
    curriculum = CurriculumConfig(
        enabled=not args.no_curriculum,
        **_given(T_start=args.T_start, T_step=args.T_step, epochs_per_stage=args.epochs_per_stage),
    )
    return TrainConfig(
        model=model,
        curriculum=curriculum,
        snr_lo_db=args.snr_lo if args.snr_lo is not None else lo,
        snr_hi_db=args.snr_hi if args.snr_hi is not None else hi,
        **_given(
            phase=args.phase,
            alpha=args.alpha,
            batch_size=args.batch,
            T=args.T,
            k_df_choices=tuple(args.k_df) if args.k_df else None,
            pretrain_steps=args.pretrain_steps if args.pretrain_steps is not None else args.steps,
            finetune_steps=args.finetune_steps if args.finetune_steps is not None else args.steps,
            epoch_steps=args.epoch_steps,
            learning_rate=args.lr,
            warmup_steps=args.warmup,
            plateau_tolerance=args.plateau_tolerance,
            df_refresh_interval=args.df_refresh,
            fading=args.fading,
            kappa=args.kappa,
            seed=args.seed,
            log_every=args.log_every,
        ),
    )


def build_eval_config(args) -> EvalConfig:
    return EvalConfig(
        method=args.method,
        scheme=args.mod,
        oracle_feedback=bool(args.oracle_feedback),
        **_given(
            n_t=args.n_t,
            n_r=args.n_r,
            snr_db=args.snr,
            k=args.pilots,
            T=args.T,
            n_prompts=args.prompts,
            checkpoint=args.ckpt,
            seed=args.seed,
            fading=args.fading,
            kappa=args.kappa,
            mlsd_max_T=args.mlsd_max_T,
        ),
    )


def build_theory_config(args) -> TheoryConfig:
    return TheoryConfig(
        **_given(
            d=args.d,
            sigma2=args.sigma2,
            xi2=args.xi2,
            k_grid=args.k_grid,
            trials=args.trials,
            seed=args.seed,
            query=args.query,
        )
    )


class Workbench:
    """Wires settings, repositories and managers for one CLI invocation"""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.output_dir = Path(settings.output_dir)
        self.checkpoint_repo = CheckpointRepository()
        self.curve_repo = CurveRepository()
        self.trace_repo = TraceRepository()
        self.manifest_repo = ManifestRepository()

    def _manifest(self, command: str, config, seed, argv, started_at, outputs, results, n_primary: int = 1) -> Path:
        """Write one manifest beside each of the first n_primary outputs"""
        manifest = RunManifest(
            subcommand=command,
            config=config.model_dump(mode="json") if hasattr(config, "model_dump") else dict(config),
            seed=seed,
            code_version=__version__,
            argv=list(argv),
            started_at=started_at,
            finished_at=datetime.now(timezone.utc),
            outputs=[str(o) for o in outputs],
            results=results,
        )
        paths = [self.manifest_repo.write(manifest, output) for output in outputs[:n_primary]]
        return paths[0]

    def train(self, args, argv, started_at) -> int:
        config = build_train_config(args, self.settings)
        ckpt = Path(args.ckpt) if args.ckpt else self.output_dir / f"model-{config.model.scheme.value}.bin"
        trace_path = Path(args.trace) if args.trace else ckpt.with_suffix(".trace.csv")

        initial = self.checkpoint_repo.load(args.init).model if args.init else None
        manager = TrainingManager(config, self.checkpoint_repo)
        try:
            result = manager.train(initial_model=initial, checkpoint_path=ckpt)
        except TrainingDivergedError as e:
            self.trace_repo.save(e.trace, trace_path)
            raise
        self.trace_repo.save(result.trace, trace_path)

        print(format_training_summary(result.trace, result.switch_step))
        self._manifest(
            "train",
            config,
            config.seed,
            argv,
            started_at,
            [ckpt, trace_path, *result.checkpoints[:-1]],
            {
                "parameters": result.model.parameter_count,
                "switch_step": result.switch_step,
                "final_loss": result.trace[-1].loss if result.trace else None,
            },
            n_primary=2,
        )
        return EXIT_OK

    def evaluate(self, args, argv, started_at) -> int:
        config = build_eval_config(args)
        out = (
            Path(args.out)
            if args.out
            else self.output_dir / f"{config.method.value}-{config.scheme.value}-snr{config.snr_db:g}-k{config.k}.csv"
        )
        curve = EvaluationManager(self.settings, self.checkpoint_repo).run_eval(config)
        self.curve_repo.save(curve, out)

        print(format_curve_summary(curve))
        self._manifest(
            "eval",
            config,
            config.seed,
            argv,
            started_at,
            [out],
            {
                "gain_df": curve.gain_df,
                "reference_ser": curve.reference_ser,
                "neighbor_error_fraction": curve.neighbor_error_fraction,
                "metadata": curve.metadata,
            },
        )
        return EXIT_OK

    def theory(self, args, argv, started_at) -> int:
        config = build_theory_config(args)
        out = Path(args.out) if args.out else self.output_dir / f"theory-{args.which}.csv"
        lab = TheoryLab(config)
        table = lab.thm1_sweep() if args.which == "thm1" else lab.thm2_sweep()

        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False)
        print(table.to_string(index=False))

        results = {}
        if args.which == "thm1" and len(table) > 1:
            results["loglog_slope"] = loglog_slope(table["k"], table["mc_error"])
        self._manifest(f"theory {args.which}", config, config.seed, argv, started_at, [out], results)
        return EXIT_OK

    def describe(self, args, argv, started_at) -> int:
        loaded = self.checkpoint_repo.load(args.ckpt)
        print(format_model_description(loaded.model.config, loaded.model.parameter_count, loaded.phase.value, loaded.meta))
        return EXIT_OK

    def compare(self, args, argv, started_at) -> int:
        labels = [label.strip() for label in args.labels.split(",")] if args.labels else None
        table = self.curve_repo.join(args.curves, labels)
        if args.out:
            out = self.curve_repo.save_joined(table, args.out)
            self._manifest("compare", {"curves": args.curves, "labels": labels}, None, argv, started_at, [out], {})
        else:
            table.to_csv(sys.stdout, index=False)
        return EXIT_OK


def parse_and_dispatch(argv: Optional[Sequence[str]] = None, settings: Optional[Settings] = None) -> int:
    """
    Parse a command line, run the subcommand and return its exit status

    0 on success, 1 when a run fails, 2 for usage and configuration errors.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    settings = settings or Settings()
    parser, commands = build_parser()

    try:
        config_path, rest = _split_config(argv)
        command = next((token for token in rest if token in commands), None)
        if config_path and command:
            apply_config_file(config_path, commands[command])
        args = parser.parse_args(rest)
    except ConfigurationError as e:
        parser.print_usage(sys.stderr)
        print(f"defined: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    if args.command in ("train", "eval") and args.mod is None:
        commands[args.command].print_usage(sys.stderr)
        print(f"defined {args.command}: error: the following arguments are required: --mod", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(log_level=args.log_level or settings.log_level, log_file=settings.log_file or None)
    torch.set_num_threads(max(1, settings.threads))
    started_at = datetime.now(timezone.utc)
    workbench = Workbench(settings)
    handler = getattr(workbench, {"eval": "evaluate"}.get(args.command, args.command))

    try:
        return handler(args, argv, started_at)
    except (ValidationError, ConfigurationError) as e:
        logger.error("invalid_configuration", command=args.command, error=str(e))
        print(f"defined {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DefinedError as e:
        logger.error("run_failed", command=args.command, error=str(e), error_type=type(e).__name__)
        print(f"defined {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main():
    """Main entry point"""
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
