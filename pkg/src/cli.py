"""Command-line driver: `python -m src.cli <subcommand> [options]`.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import LOG_LEVEL, load_config, validate_config
from .errors import LecomhError
from .models.schemas import RunConfig
from .services.pipeline import (
    STAGES,
    ExperimentPipeline,
    cmd_gen_data,
    cmd_pipeline,
    cmd_report,
    create_run_dir,
    latest_run_dir,
)

logger = logging.getLogger(__name__)

STAGE_COMMANDS = ("pretrain", "consensus", "train", "eval", "sweep")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (runs root, dataset directory or report file)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="lecomh", description="Learning to complement with multiple humans")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic train/test CSVs")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage in the latest run for this config")
    pipeline = sub.add_parser("pipeline", parents=[common], help="run every stage in a new run directory")
    pipeline.add_argument("--stage", choices=STAGES, help="resume the latest run for this config from a stage")
    pipeline.add_argument("--register", action="store_true", help="index the finished run in the registry")
    report = sub.add_parser("report", parents=[common], help="compare runs at 50%% coverage")
    report.add_argument("runs", nargs="+", help="run directories")
    serve = sub.add_parser("serve", help="serve the run registry API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=5000)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out and args.command in ("pipeline", *STAGE_COMMANDS):
        overrides["output_dir"] = args.out
    if overrides:
        config = validate_config({**config.model_dump(by_alias=True), **overrides})
    return config


def register(run_dir: Path) -> None:
    from .models.database import SessionLocal, init_db
    from .services.run_registry import RunRegistry

    init_db()
    db = SessionLocal()
    try:
        run = RunRegistry(db).register_run(run_dir)
        logger.info("registered %s as run %d", run_dir, run.id)
    finally:
        db.close()


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("src.main:app", host=args.host, port=args.port)
        return

    config = resolve_config(args)
    if args.command == "gen-data":
        for path in cmd_gen_data(config, args.out or "data", args.force):
            logger.info("wrote %s", path)
    elif args.command == "report":
        frame = cmd_report(args.runs, args.out or "report.csv", args.force)
        logger.info("report with %d rows written to %s", len(frame), args.out or "report.csv")
    elif args.command == "pipeline":
        run_dir = cmd_pipeline(config, args.stage, args.force)
        logger.info("run finished: %s", run_dir)
        if args.register:
            register(run_dir)
    else:
        run_dir = latest_run_dir(config, config.output_dir)
        start = args.command
        if run_dir is None:
            # a fresh run directory has nothing to resume from
            run_dir, start = create_run_dir(config, config.output_dir), STAGES[0]
        ExperimentPipeline(config, run_dir).run(start=start, stop=args.command)
        logger.info("stage %s finished in %s", args.command, run_dir)


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except LecomhError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
