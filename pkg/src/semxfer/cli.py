"""Command-line entry point: ``semxfer gen | train | eval | run``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DataError, GenConfig, GenerationError, gen_dataset, read_dataset, write_dataset
from .retrieval import DEFAULT_KS, REGIME_PROTOCOLS, ProtocolError, format_table, run_baselines, run_matrix
from .trainer import (
    REGIMES,
    Checkpoint,
    ConfigError,
    FormatError,
    NumericalAbort,
    TrainConfig,
    read_checkpoint,
    train,
    write_checkpoint,
)

logger = logging.getLogger("semxfer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class EvalConfig:
    regimes: list = field(default_factory=lambda: list(REGIMES))
    ks: list = field(default_factory=lambda: list(DEFAULT_KS))
    baselines: str = "all"

    def __post_init__(self):
        unknown = set(self.regimes) - set(REGIMES)
        if unknown:
            raise ConfigError(f"unknown regimes {sorted(unknown)}")
        if self.baselines not in ("all", "none"):
            raise ConfigError("baselines must be 'all' or 'none'")
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError("ks must be positive integers")


@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: Path = Path("out")

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        """Parse a config file; ``output_dir`` is resolved against the file's directory."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(raw) - {"gen", "train", "eval", "output_dir"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        try:
            gen = GenConfig.from_json(raw.get("gen", {}))
            ev = raw.get("eval", {})
            bad = set(ev) - {f.name for f in dataclasses.fields(EvalConfig)}
            if bad:
                raise ConfigError(f"unknown eval keys {sorted(bad)}")
            ecfg = EvalConfig(**ev)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None
        tcfg = TrainConfig.from_json(raw.get("train", {}))
        return cls(gen, tcfg, ecfg, path.parent / raw.get("output_dir", "out"))


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--k values must be positive")
    return ks


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def do_gen(cfg: GenConfig, out: Path) -> dict:
    manifest = write_dataset(gen_dataset(cfg), out)
    logger.info("wrote dataset %s to %s", manifest["dataset_hash"][:12], out)
    return manifest


def do_train(cfg: TrainConfig, data: Path, out: Path, log_path: Path | None = None) -> Checkpoint:
    ds, manifest = read_dataset(data, verify=True)
    log: list = []
    try:
        ckpt = train(cfg, ds, manifest["dataset_hash"], log)
    finally:
        log_path = log_path or out.with_name(out.name + ".log.jsonl")
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = write_checkpoint(out, ckpt)
    logger.info("wrote checkpoint %s (%s) to %s", cfg.regime, digest[:12], out)
    return ckpt


def do_eval(ckpt_paths: list[Path], data: Path, ks, baselines: str, out: Path | None = None):
    """Evaluate checkpoints; returns (reports, table text). Writes per-regime JSON under ``out``."""
    ds, manifest = read_dataset(data, verify=True)
    ckpts: dict[str, Checkpoint] = {}
    for p in ckpt_paths:
        ck = read_checkpoint(p)
        if ck.manifest_hash and ck.manifest_hash != manifest["dataset_hash"]:
            raise DataError(f"{p}: trained on dataset {ck.manifest_hash[:12]}, not {manifest['dataset_hash'][:12]}")
        if ck.config.regime in ckpts:
            raise ConfigError(f"{p}: more than one checkpoint for regime {ck.config.regime}")
        ckpts[ck.config.regime] = ck
    ks = tuple(int(k) for k in ks)
    reports = run_matrix(ckpts, ds, ks, manifest["dataset_hash"])
    if baselines == "all":
        base = ckpts.get("transfer") or next(iter(ckpts.values()))
        reports += run_baselines(base, ds, ks, manifest["dataset_hash"])
    table = "\n\n".join(format_table(reports, str(k)) for k in ks)
    if out is not None:
        by_regime: dict[str, list] = {}
        for rep in reports:
            by_regime.setdefault(rep.regime, []).append(rep.to_json())
        for regime, reps in by_regime.items():
            _write_json(out / f"report_{regime}.json", reps)
        (out / "table.txt").write_text(table + "\n")
    return reports, table


def run_pipeline(exp: ExperimentConfig) -> dict:
    """gen, then train every configured regime, then eval; everything under ``exp.output_dir``."""
    root = Path(exp.output_dir)
    data = root / "data"
    do_gen(exp.gen, data)
    paths = []
    for regime in exp.eval.regimes:
        cfg = dataclasses.replace(exp.train, regime=regime)
        path = root / "ckpt" / f"{regime}.ckpt"
        do_train(cfg, data, path, root / "logs" / f"{regime}.jsonl")
        paths.append(path)
    reports, table = do_eval(paths, data, exp.eval.ks, exp.eval.baselines, root / "reports")
    return {"data": data, "checkpoints": paths, "reports": reports, "table": table}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semxfer", description="Transformation transfer through a shared embedding space.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--config", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one regime")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--regime", choices=list(REGIMES))
    t.add_argument("--log", type=Path, help="training log (default: <out>.log.jsonl)")

    e = sub.add_parser("eval", help="evaluate checkpoints")
    e.add_argument("--ckpt", type=Path, nargs="+", required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--k", default=",".join(map(str, DEFAULT_KS)))
    e.add_argument("--baselines", choices=("all", "none"), default="none")
    e.add_argument("--out", type=Path, help="directory for JSON reports")

    r = sub.add_parser("run", help="gen + train all regimes + eval from one config")
    r.add_argument("--config", type=Path, required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.cmd == "gen":
            do_gen(ExperimentConfig.load(args.config).gen, args.out)
        elif args.cmd == "train":
            cfg = ExperimentConfig.load(args.config).train
            if args.regime:
                cfg = dataclasses.replace(cfg, regime=args.regime)
            do_train(cfg, args.data, args.out, args.log)
        elif args.cmd == "eval":
            _, table = do_eval(args.ckpt, args.data, _parse_ks(args.k), args.baselines, args.out)
            print(table)
        else:
            print(run_pipeline(ExperimentConfig.load(args.config))["table"])
    except (ConfigError, GenerationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, ProtocolError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
