"""Command-line client for the pipeline service.

Every subcommand marshals its flags into the service-layer requests and
prints the response; pipeline logic lives in the core package. By default
commands execute in-process against a local run directory; pass --server to
target a running service instead.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .pipeline import (
    STAGES,
    ExperimentConfig,
    PipelineError,
    RunRecord,
    config_from_dict,
    config_from_file,
    create_run,
    default_synth_config,
    parse_metrics_file,
    run_all,
    run_stage,
)

STAGE_COMMANDS = (
    "synth",
    "train-biased",
    "extract",
    "caption",
    "filter",
    "generate",
    "assemble",
    "train-debiased",
    "evaluate",
    "report",
)


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = config_from_file(args.config)
    else:
        cfg = default_synth_config(seed=args.seed if args.seed is not None else 0)
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.deterministic:
        raw["deterministic"] = True
    if getattr(args, "trials", None) is not None:
        raw["eval"] = dict(raw["eval"], trials=args.trials)
    if getattr(args, "report", None):
        raw["filter"] = dict(raw["filter"], emit_report=True)
    return config_from_dict(raw)


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


class LocalClient:
    """Direct, in-process execution against a run directory."""

    def run_stage_cmd(self, args: argparse.Namespace, stage: str) -> dict:
        cfg = _load_config(args)
        record = create_run(args.run_dir, cfg, resume=True)
        rec = run_stage(record, config_from_dict(record.config), stage)
        return {"run_id": record.run_id, "stage": stage, "record": rec.to_dict()}

    def run_all_cmd(self, args: argparse.Namespace) -> dict:
        cfg = _load_config(args)
        record = run_all(args.run_dir, cfg, resume=args.resume)
        payload = {"run_id": record.run_id, "run_dir": str(record.run_dir)}
        metrics = record.run_dir / "metrics" / "metrics.txt"
        if metrics.exists():
            payload["metrics"] = parse_metrics_file(metrics)
        table = record.run_dir / "report" / "comparison.txt"
        if table.exists():
            payload["report"] = str(table)
        return payload


class HttpClient:
    """Same surface, but talking to a running service."""

    def __init__(self, server: str):
        import httpx

        self.http = httpx.Client(base_url=server, timeout=None)

    def _create_run(self, args: argparse.Namespace, resume: bool) -> dict:
        cfg = _load_config(args)
        body = {"config": cfg.to_dict(), "resume": resume}
        if args.run_dir:
            body["run_dir"] = str(args.run_dir)
        resp = self.http.post("/runs", json=body)
        resp.raise_for_status()
        return resp.json()

    def run_stage_cmd(self, args: argparse.Namespace, stage: str) -> dict:
        run = self._create_run(args, resume=True)
        resp = self.http.post(f"/runs/{run['run_id']}/stages/{stage}")
        resp.raise_for_status()
        return resp.json()

    def run_all_cmd(self, args: argparse.Namespace) -> dict:
        run = self._create_run(args, resume=args.resume)
        resp = self.http.post(f"/runs/{run['run_id']}/run-all", json={"resume": True})
        resp.raise_for_status()
        payload = resp.json()
        metrics = self.http.get(f"/runs/{run['run_id']}/metrics")
        if metrics.status_code == 200:
            payload["metrics"] = metrics.json()["metrics"]
        return payload


def _add_common(parser: argparse.ArgumentParser, trials: bool = False) -> None:
    parser.add_argument("--config", type=Path, default=None, help="experiment config file")
    parser.add_argument("--run-dir", type=Path, required=True, help="run directory")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic kernels and seeded order")
    parser.add_argument("--resume", action="store_true",
                        help="continue an existing run directory")
    parser.add_argument("--server", default=None,
                        help="execute against a running service at this URL")
    if trials:
        parser.add_argument("--trials", type=int, default=None,
                            help="repeat the pipeline this many times (seeds seed+i)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debiaskit",
        description="Debiasing pipeline: bias a classifier, mine its conflicts, "
                    "caption, filter, regenerate, retrain.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGE_COMMANDS:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p, trials=(stage == "evaluate"))
        if stage == "filter":
            p.add_argument("--report", action="store_true", default=None,
                           help="emit the word-frequency table as a two-column file")
    p = sub.add_parser("run-all", help="run the full pipeline plus the vanilla baseline arm")
    _add_common(p, trials=True)
    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--runs-root", type=Path, default=Path("runs"))
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(args.runs_root), host=args.host, port=args.port)
        return 0

    client = HttpClient(args.server) if args.server else LocalClient()
    try:
        if args.command == "run-all":
            _emit(client.run_all_cmd(args))
        else:
            _emit(client.run_stage_cmd(args, args.command))
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
