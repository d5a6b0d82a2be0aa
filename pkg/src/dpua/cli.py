"""Command-line entry point: ``dpua prepare|train-dp|train-ua|eval|report``.

Exit codes: 0 ok, 2 input or config error, 3 training failure, 4 judge
(external service) failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import torch

from .data import (
    STATS_HEADER,
    TaskKind,
    dataset_stats,
    default_profile,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    DataError,
    DPUAError,
    EmptyEvalSet,
    JudgeUnavailable,
    VersionMismatch,
)
from .grpo import AlignConfig, train_ua
from .metrics import REPORT_COLUMNS, evaluate, write_report
from .perception import PerceptionConfig, train_dp
from .pipeline import file_digest, new_policy
from .policy import PolicyConfig, checkpoint_digest, load_checkpoint, save_checkpoint
from .rewards import RemoteJudge

log = logging.getLogger("dpua")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_SERVICE = 0, 2, 3, 4

DEFAULT_JUDGE = {"kind": "mock", "protocol": "chat", "model": "gpt-4o-mini", "cache_dir": None,
                 "max_retries": 3, "timeout": 30.0, "min_interval": 0.0}


def default_config() -> dict:
    """Config document with every tunable filled in."""
    return {
        "run_dir": "runs/default",
        "dataset": None,
        "task": None,
        "seed": 0,
        "workers": 1,
        "policy": dataclasses.asdict(PolicyConfig()),
        "perception": dataclasses.asdict(PerceptionConfig()),
        "align": dataclasses.asdict(AlignConfig()),
        "judge": dict(DEFAULT_JUDGE),
    }


_SECTIONS = {"policy": PolicyConfig, "perception": PerceptionConfig, "align": AlignConfig}


def load_config(path: str | Path) -> dict:
    """Read a JSON config and merge it over the defaults; unknown keys are errors."""
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = default_config()
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    # the top-level seed feeds every section that did not pin its own
    for section in _SECTIONS:
        if "seed" not in user.get(section, {}):
            cfg[section]["seed"] = cfg["seed"]
    if cfg["judge"]["kind"] not in ("mock", "remote"):
        raise ConfigError("judge.kind must be 'mock' or 'remote'")
    cfg["align"]["judge"] = cfg["judge"]["kind"]
    return cfg


def section(cfg: dict, name: str):
    try:
        return _SECTIONS[name](**cfg[name])
    except TypeError as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from None


class RunDir:
    """Append-only run directory guarded by an exclusive lock file."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"
        self._lock = self.root / ".lock"

    @contextlib.contextmanager
    def locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory {self.root} is locked by another process "
                              f"(remove {self._lock} if that process is gone)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            self._lock.unlink(missing_ok=True)

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"run_id": self.root.name, "created": _now(), "lineage": []}

    def write_manifest(self, manifest: dict) -> None:
        manifest["updated"] = _now()
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(self.manifest_path)

    def next_path(self, stage: str, sub: str = "checkpoints") -> Path:
        """First unused ``<sub>/<stage>-NNN``; earlier runs are never overwritten."""
        base = self.root / sub
        base.mkdir(parents=True, exist_ok=True)
        k = 0
        while (base / f"{stage}-{k:03d}").exists() or (base / f"{stage}-{k:03d}.jsonl").exists():
            k += 1
        return base / f"{stage}-{k:03d}"

    def record(self, stage: str, checkpoint: Path, parent: str | None, cfg: dict,
               dataset_digest: str | None) -> dict:
        manifest = self.manifest()
        rel = str(checkpoint.relative_to(self.root))
        if any(e["checkpoint"] == rel for e in manifest["lineage"]):
            raise ConfigError(f"checkpoint {rel} is already in the lineage")
        entry = {"stage": stage, "checkpoint": rel, "parent": parent,
                 "digest": checkpoint_digest(checkpoint), "created": _now(),
                 "seed": cfg.get("seed"), "config": cfg, "dataset_digest": dataset_digest}
        manifest["lineage"].append(entry)
        manifest["seed"] = cfg.get("seed")
        if dataset_digest:
            manifest["dataset_digest"] = dataset_digest
        self.write_manifest(manifest)
        return entry


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _set_workers(n: int) -> None:
    if n < 1:
        raise ConfigError("workers must be >= 1")
    torch.set_num_threads(n)


def _load_samples(path, task=None, strict=True):
    if not path:
        raise ConfigError("no dataset path configured")
    if not Path(path).exists():
        raise DataError(f"dataset not found: {path}")
    return load_dataset(path, task=task, strict=strict)


def _print_stats(name: str, samples) -> None:
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(STATS_HEADER)
    w.writerow(dataset_stats(samples).table_row(name))


# -- subcommands ------------------------------------------------------------

def cmd_prepare(args) -> int:
    if args.input:
        samples = load_dataset(args.input, task=args.task, strict=not args.lenient)
        name = Path(args.input).stem
    else:
        kwargs = {"buckets": [b.strip() for b in args.buckets.split(",")]} if args.buckets else {}
        profile = default_profile(args.synth, test_fraction=args.test_fraction, **kwargs)
        samples = generate_synthetic(args.n, profile, seed=args.seed)
        name = f"synthetic-{TaskKind(args.synth).value}"
    save_dataset(samples, args.output)
    _print_stats(args.name or name, samples)
    return EXIT_OK


def cmd_train_dp(args) -> int:
    cfg = load_config(args.config)
    _set_workers(args.workers or cfg["workers"])
    run = RunDir(args.run_dir or cfg["run_dir"])
    pcfg = section(cfg, "policy")
    dcfg = section(cfg, "perception")
    samples = _load_samples(cfg["dataset"], cfg["task"])
    digest = file_digest(cfg["dataset"])
    with run.locked():
        base_path = run.next_path("base")
        policy = new_policy(samples, pcfg)
        policy.meta.update({"phase": "base"})
        save_checkpoint(policy, base_path)
        base = run.record("base", base_path, None, cfg, digest)
        dp_path = run.next_path("dp")
        log_path = run.next_path("dp", "logs").with_suffix(".jsonl")
        try:
            policy, records = train_dp(samples, policy, dcfg, log_path=log_path)
        except (DataError, ConfigError):
            raise
        except Exception as exc:
            raise _TrainingFailed(f"phase-1 training failed: {exc}; partial logs in {run.root}") from exc
        save_checkpoint(policy, dp_path)
        run.record("dp", dp_path, base["checkpoint"], cfg, digest)
    epochs = [r for r in records if r["kind"] == "epoch"]
    for r in epochs:
        print(f"epoch {r['epoch']}\tloss {r['loss']:.4f}")
    print(f"checkpoint\t{dp_path}")
    return EXIT_OK


def _make_judge(cfg: dict, workers: int):
    a = cfg["align"]
    if a["reward"] == "accuracy" or not a["reasoning_on"]:
        return None
    j = cfg["judge"]
    if j["kind"] == "mock":
        return None
    return RemoteJudge.from_env(protocol=j["protocol"], model=j["model"], cache_dir=j["cache_dir"],
                                max_retries=j["max_retries"], timeout=j["timeout"],
                                min_interval=j["min_interval"], max_workers=workers)


def cmd_train_ua(args) -> int:
    cfg = load_config(args.config)
    workers = args.workers or cfg["workers"]
    _set_workers(workers)
    acfg = section(cfg, "align")
    run = RunDir(args.run_dir or cfg["run_dir"])
    samples = _load_samples(cfg["dataset"], cfg["task"])
    digest = file_digest(cfg["dataset"])
    judge = _make_judge(cfg, workers)
    ckpt = Path(args.checkpoint)
    policy = load_checkpoint(ckpt)
    with run.locked():
        try:
            parent = str(ckpt.resolve().relative_to(run.root.resolve()))
        except ValueError:
            parent = str(ckpt)
        state_dir = run.root / "ua_state" / ckpt.name
        log_path = run.root / "logs" / f"ua-from-{ckpt.name}.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        if not args.resume and state_dir.exists():
            raise ConfigError(f"alignment state exists at {state_dir}; pass --resume to continue it")
        try:
            policy, records = train_ua(samples, policy, acfg, judge=judge, log_path=log_path,
                                       state_dir=state_dir, resume=args.resume)
        except (JudgeUnavailable, DataError, ConfigError):
            raise
        except Exception as exc:
            raise _TrainingFailed(f"alignment failed: {exc}; resumable state in {state_dir}") from exc
        ua_path = run.next_path("ua")
        save_checkpoint(policy, ua_path)
        run.record("ua", ua_path, parent, cfg, digest)
        # resume state is scratch; once the final checkpoint is recorded it goes
        shutil.rmtree(state_dir, ignore_errors=True)
    if records:
        last = records[-1]
        print(f"steps {last['step']}\tmean_reward {last['mean_reward']:.4f}\t"
              f"mean_mae {last['mean_mae'] if last['mean_mae'] is not None else float('nan'):.4f}")
    print(f"checkpoint\t{ua_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.workers:
        _set_workers(args.workers)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    policy = load_checkpoint(ckpt)
    samples = _load_samples(args.dataset, strict=not args.lenient)
    run_id = args.run_id or ckpt.name
    if args.transfer:
        if "->" not in args.transfer:
            raise ConfigError("--transfer expects SOURCE->TARGET")
        source, target = (p.strip() for p in args.transfer.split("->", 1))
        label, pair = f"{source}->{target}", f"{source}-to-{target}"
    else:
        label = pair = Path(args.dataset).stem
    report, _ = evaluate(policy, samples, split=args.split, label=label, n_bins=args.bins)
    write_report(report, args.report_dir, run_id, pair)
    out = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    out.writerow(["Setting", *REPORT_COLUMNS])
    out.writerow([label, *report.row()])
    out.writerow([])
    out.writerow(["bin", "model", "human"])
    for row in report.histogram.rows():
        out.writerow(row)
    for flag in report.flags:
        print(f"note: {flag}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    files = sorted(Path(args.report_dir).glob("*_report.json"))
    if not files:
        raise DataError(f"no *_report.json files in {args.report_dir}")
    rows = []
    for f in files:
        d = json.loads(f.read_text(encoding="utf-8"))
        coef = d["pearson_coef"]
        rows.append([f.name[:-len("_report.json")], d.get("label", ""), f"{d['accuracy']:.4f}",
                     f"{d['macro_f1']:.4f}", f"{d['mean_mae']:.4f}",
                     "nan" if coef is None else f"{coef:.4f}"])
    header = ["Run", "Setting", *REPORT_COLUMNS]
    out_path = Path(args.output) if args.output else Path(args.report_dir) / "summary.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return EXIT_OK


def cmd_config(args) -> int:
    print(json.dumps(default_config(), indent=2, sort_keys=True))
    return EXIT_OK


class _TrainingFailed(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpua", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="validate a corpus or synthesize one; print its statistics")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="JSON-lines corpus to validate")
    src.add_argument("--synth", choices=[t.value for t in TaskKind], help="synthesize a corpus for this task")
    sp.add_argument("--output", required=True, help="where to write the validated dataset")
    sp.add_argument("--task", choices=[t.value for t in TaskKind], help="task for records lacking one")
    sp.add_argument("--n", type=int, default=512, help="synthetic corpus size (default 512)")
    sp.add_argument("--seed", type=int, default=0, help="synthetic corpus seed (default 0)")
    sp.add_argument("--buckets", help="comma-separated agreement buckets, e.g. unanimous,split-3/2")
    sp.add_argument("--test-fraction", type=float, default=0.25, help="synthetic test share (default 0.25)")
    sp.add_argument("--name", help="dataset name for the statistics row")
    sp.add_argument("--lenient", action="store_true", help="ignore unknown record fields")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train-dp", help="supervised disagreement-perception phase")
    sp.add_argument("--config", required=True, help="JSON config file")
    sp.add_argument("--run-dir", help="override the config's run_dir")
    sp.add_argument("--workers", type=int, help="CPU threads")
    sp.set_defaults(func=cmd_train_dp)

    sp = sub.add_parser("train-ua", help="GRPO uncertainty-alignment phase")
    sp.add_argument("--config", required=True, help="JSON config file")
    sp.add_argument("--checkpoint", required=True, help="phase-1 checkpoint directory")
    sp.add_argument("--run-dir", help="override the config's run_dir")
    sp.add_argument("--resume", action="store_true", help="continue from saved alignment state")
    sp.add_argument("--workers", type=int, help="CPU threads and concurrent judge calls")
    sp.set_defaults(func=cmd_train_ua)

    sp = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--dataset", required=True, help="JSON-lines dataset")
    sp.add_argument("--report-dir", required=True, help="where report files go")
    sp.add_argument("--split", default="test", help="split to score (default test)")
    sp.add_argument("--transfer", help="label the run as a cross-task transfer, SOURCE->TARGET")
    sp.add_argument("--run-id", help="run id stamped into report names (default checkpoint name)")
    sp.add_argument("--bins", type=int, default=10, help="histogram bins (default 10)")
    sp.add_argument("--lenient", action="store_true", help="ignore unknown record fields")
    sp.add_argument("--workers", type=int, help="CPU threads")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="collect report files into one table")
    sp.add_argument("--report-dir", required=True, help="directory holding *_report.json files")
    sp.add_argument("--output", help="summary CSV path (default REPORT_DIR/summary.csv)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("config", help="print the default config document")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except JudgeUnavailable as exc:
        print(f"error: judge unavailable: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except _TrainingFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (DataError, ConfigError, EmptyEvalSet, CorruptCheckpoint, VersionMismatch,
            FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DPUAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
