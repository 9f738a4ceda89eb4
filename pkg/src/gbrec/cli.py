"""Command-line entry point: ``gbrec <command> ...``.

Every artifact-producing command writes its outputs under ``--out`` with
fixed file names plus one ``manifest.json``. The exit status is 0 only
after the manifest has been written.
"""

from __future__ import annotations

import argparse
import ast
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from gbrec import __version__
from gbrec.container import ContainerError
from gbrec.estimators import BASELINES, MVPRec
from gbrec.evaluation import VARIANTS, MetricReport, comparison_table, evaluate, variant_config
from gbrec.ingest import (
    RATIO_BINS,
    Dataset,
    FormatError,
    build_dataset,
    compute_stats,
    load_group_buy_dataset,
    load_ratings_dataset,
)
from gbrec.training import Checkpoint, TrainConfig, grid_search, parse_config, parse_grid, train

logger = logging.getLogger("gbrec")

DATASET_FILE = "dataset.bin"
CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.ndjson"
METRICS_FILE = "metrics.txt"
MANIFEST_FILE = "manifest.json"
STATS_FILE = "stats.txt"
GRID_FILE = "grid.tsv"
COMPARISON_FILE = "comparison.tsv"
THREADS_ENV = "GB_REC_THREADS"


class CommandError(Exception):
    """Operator error; reported on stderr with a nonzero exit."""


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(vals) != 3 or any(v < 0 for v in vals) or abs(sum(vals) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError("ratios must be three non-negative numbers summing to 1")
    return vals


def _require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"{what} not found: {path}")
    return path


def _dataset_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / DATASET_FILE
    return _require(p, "dataset")


def _load_dataset(path: str) -> tuple[Dataset, Path]:
    p = _dataset_path(path)
    return Dataset.load(p), p


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        cfg = parse_config(_require(path, "config").read_text(encoding="utf-8"))
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _parse_params(path: str | None) -> dict:
    """Flat key=value file of estimator parameters (values parsed as Python literals when possible)."""
    params = {}
    if not path:
        return params
    for lineno, line in enumerate(_require(path, "config").read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            params[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            params[key] = {"true": True, "false": False}.get(value.lower(), value)
    return params


class Run:
    """Collects outputs and writes the manifest last."""

    def __init__(self, command: str, out: str, argv):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.argv = list(argv)
        self.started = time.time()
        self.timings: dict[str, float] = {}
        self.outputs: list[Path] = []
        self.info: dict = {"config": None, "dataset_sha256": None, "seed": None}

    @contextlib.contextmanager
    def timed(self, stage: str):
        t = time.perf_counter()
        yield
        self.timings[stage] = round(time.perf_counter() - t, 6)

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = self.out / name
        path.write_bytes(data)
        self.outputs.append(path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def manifest(self) -> Path:
        doc = {
            "command": self.command,
            "argv": self.argv,
            "version": f"gbrec-{__version__}",
            **self.info,
            "outputs": {p.name: _sha256(p) for p in self.outputs},
            "started_unix": round(self.started, 3),
            "timings_seconds": {**self.timings, "total": round(time.time() - self.started, 6)},
        }
        path = self.out / MANIFEST_FILE
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, run: Run) -> None:
    if args.social or args.records:
        if not (args.social and args.records):
            raise CommandError("--social and --records must be given together")
        if args.ratings or args.trust:
            raise CommandError("use either --social/--records or --ratings/--trust")
        social_path = _require(args.social, "social file")
        records_path = _require(args.records, "records file")
        with run.timed("parse"):
            social, records, users, items = load_group_buy_dataset(social_path, records_path)
        source = {"format": "group-buy", "social": str(social_path), "records": str(records_path)}
    elif args.ratings and args.trust:
        ratings_path = _require(args.ratings, "ratings file")
        trust_path = _require(args.trust, "trust file")
        with run.timed("derive"):
            social, records, users, items = load_ratings_dataset(ratings_path, trust_path)
        source = {"format": "ratings+trust", "ratings": str(ratings_path), "trust": str(trust_path)}
    else:
        raise CommandError("give --social and --records, or --ratings and --trust")
    if not records:
        raise CommandError("no group-buy records found")
    with run.timed("build"):
        ds = build_dataset(
            social, records, len(items), args.ratios, args.seed, users.raw, items.raw, {"source": source}
        )
    path = run.write_bytes(DATASET_FILE, ds.to_bytes())
    run.info.update(seed=args.seed, dataset_sha256=_sha256(path), config={"ratios": list(args.ratios)})
    print(
        f"users {ds.user_count} items {ds.item_count} social {social.edge_count} "
        f"records {len(ds.records)} train {len(ds.train)} valid {len(ds.valid)} test {len(ds.test)}"
    )


def _histogram_tsv(header: str, rows) -> str:
    return header + "\tcount\n" + "".join(f"{k}\t{v}\n" for k, v in rows)


def cmd_stats(args, run: Run) -> None:
    ds, path = _load_dataset(args.dataset)
    run.info["dataset_sha256"] = _sha256(path)
    with run.timed("stats"):
        report = compute_stats(ds)
    run.write_text(STATS_FILE, report.to_text())
    run.write_text("group_size.tsv", _histogram_tsv("group_size", sorted(report.group_size_histogram.items())))
    run.write_text("social_ratio.tsv", _histogram_tsv("social_ratio", ((b, report.social_ratio_histogram[b]) for b in RATIO_BINS)))
    run.write_text("role_ratio.tsv", _histogram_tsv("role_ratio", ((b, report.role_ratio_histogram[b]) for b in RATIO_BINS)))
    sys.stdout.write(report.to_text())


def _write_training(run: Run, ds: Dataset, result, split: str, system: str | None = None) -> MetricReport:
    run.write_bytes(CHECKPOINT_FILE, result.checkpoint.to_bytes())
    run.write_text(HISTORY_FILE, result.history_lines())
    est = MVPRec.from_checkpoint(result.checkpoint, ds)
    report = evaluate(est, ds, split, config=result.checkpoint.config.to_dict())
    report.config["best_epoch"] = result.best_epoch
    if system:
        report.system = system
    run.write_text(METRICS_FILE, report.to_text())
    return report


def cmd_train(args, run: Run) -> None:
    ds, path = _load_dataset(args.dataset)
    cfg = _load_config(args.config, args.seed)
    run.info.update(dataset_sha256=_sha256(path), config=cfg.to_dict(), seed=cfg.seed)
    with run.timed("train"):
        result = train(ds, cfg)
    with run.timed("evaluate"):
        report = _write_training(run, ds, result, args.split)
    sys.stdout.write(report.to_text())


def cmd_grid(args, run: Run) -> None:
    ds, path = _load_dataset(args.dataset)
    base = _load_config(args.config, args.seed)
    grid = parse_grid(_require(args.grid, "grid file").read_text(encoding="utf-8"))
    run.info.update(dataset_sha256=_sha256(path), config={"base": base.to_dict(), "grid": grid}, seed=base.seed)
    with run.timed("grid"):
        res = grid_search(ds, grid, base)
    run.write_text(GRID_FILE, res.to_tsv())
    run.info["config"]["best"] = res.best_config.to_dict()
    with run.timed("evaluate"):
        report = _write_training(run, ds, res.best_result, args.split)
    sys.stdout.write(res.to_tsv())
    sys.stdout.write(report.to_text())


def cmd_eval(args, run: Run) -> None:
    ds, path = _load_dataset(args.dataset)
    run.info["dataset_sha256"] = _sha256(path)
    if bool(args.checkpoint) == bool(args.baseline):
        raise CommandError("give exactly one of --checkpoint or --baseline")
    if args.checkpoint:
        ck_path = _require(args.checkpoint, "checkpoint")
        ck = Checkpoint.load(ck_path)
        if (ck.n_users, ck.n_items) != (ds.user_count, ds.item_count):
            raise CommandError("checkpoint does not match the dataset's user/item counts")
        est = MVPRec.from_checkpoint(ck, ds)
        run.info.update(config=ck.config.to_dict(), seed=ck.config.seed, checkpoint_sha256=_sha256(ck_path))
    else:
        params = _parse_params(args.config)
        if args.seed is not None:
            params["seed"] = args.seed
        cls = BASELINES[args.baseline]
        try:
            est = cls(**params)
        except TypeError as exc:
            raise CommandError(f"bad parameters for baseline {args.baseline!r}: {exc}") from None
        with run.timed("fit"):
            est.fit(ds)
        run.info.update(config=est.get_params(), seed=est.get_params().get("seed"))
    with run.timed("evaluate"):
        report = evaluate(est, ds, args.split)
    run.write_text(METRICS_FILE, report.to_text())
    sys.stdout.write(report.to_text())


def cmd_ablate(args, run: Run) -> None:
    ds, path = _load_dataset(args.dataset)
    cfg = variant_config(_load_config(args.config, args.seed), args.variant)
    run.info.update(dataset_sha256=_sha256(path), config=cfg.to_dict(), seed=cfg.seed, variant=args.variant)
    with run.timed("train"):
        result = train(ds, cfg)
    with run.timed("evaluate"):
        report = _write_training(run, ds, result, args.split, f"mvprec-variant-{args.variant}")
    sys.stdout.write(report.to_text())


def cmd_compare(args, run: Run) -> None:
    reports = []
    for p in args.reports:
        path = Path(p)
        if path.is_dir():
            path = path / METRICS_FILE
        reports.append(MetricReport.from_text(_require(path, "metrics report").read_text(encoding="utf-8")))
    table = comparison_table(reports)
    run.info["config"] = {"reports": [str(p) for p in args.reports]}
    run.write_text(COMPARISON_FILE, table)
    sys.stdout.write(table)


def cmd_synth(args, run: Run) -> None:
    from gbrec import synthetic

    run.info["seed"] = args.seed
    if args.kind == "trust":
        cfg = synthetic.TrustRatingsConfig() if args.seed is None else synthetic.TrustRatingsConfig(seed=args.seed)
        with run.timed("generate"):
            ratings, trust = synthetic.generate_trust_ratings(cfg)
        run.write_text("ratings.tsv", "".join(f"{r.user}\t{r.item}\t{r.rating:g}\t{r.timestamp}\n" for r in ratings))
        run.write_text("trust.tsv", "".join(f"{a}\t{b}\n" for a, b in trust))
        run.info["config"] = dataclasses.asdict(cfg)
        return
    if args.kind == "fixture":
        cfg = synthetic.SyntheticConfig() if args.seed is None else synthetic.SyntheticConfig(seed=args.seed)
        ds = synthetic.generate_synthetic(cfg)
    else:
        cfg = synthetic.RoleConfig() if args.seed is None else synthetic.RoleConfig(seed=args.seed)
        ds = synthetic.generate_role_dataset(cfg)
    run.info["config"] = dataclasses.asdict(cfg)
    run.write_text("social.tsv", "".join(f"u{a}\tu{b}\n" for a, b in ds.social.edges()))
    run.write_text(
        "records.tsv",
        "".join(f"u{r.initiator}\ti{r.item}\t{','.join(f'u{p}' for p in r.participants)}\n" for r in ds.records),
    )


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbrec", description="Participant recommendation for group buying.")
    parser.add_argument("--version", action="version", version=f"gbrec {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("ingest", cmd_ingest, "build a dataset bundle from raw files")
    p.add_argument("--social", help="TSV friendship edges (group-buy format)")
    p.add_argument("--records", help="TSV initiator, item, comma-separated participants")
    p.add_argument("--ratings", help="TSV user, item, rating, timestamp")
    p.add_argument("--trust", help="TSV trust edges")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1), help="train,valid,test (default 0.8,0.1,0.1)")

    p = add("stats", cmd_stats, "group-size, social-ratio and role-ratio statistics")
    p.add_argument("--dataset", required=True)

    for name, func, help_text in (
        ("train", cmd_train, "train MVPRec"),
        ("grid", cmd_grid, "grid search over training hyperparameters"),
        ("ablate", cmd_ablate, "train and evaluate an ablation variant"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--dataset", required=True)
        p.add_argument("--config", help="key=value training config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--split", default="valid" if name != "ablate" else "test", choices=("train", "valid", "test"))
        if name == "grid":
            p.add_argument("--grid", required=True, help="key=v1,v2,... lines")
        if name == "ablate":
            p.add_argument("--variant", required=True, choices=sorted(VARIANTS))

    p = add("eval", cmd_eval, "evaluate a checkpoint or a baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=sorted(BASELINES))
    p.add_argument("--config", help="key=value baseline parameters")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))

    p = add("compare", cmd_compare, "systems-by-metrics table from metric reports")
    p.add_argument("reports", nargs="+", help="metrics.txt files or run directories")

    p = add("synth", cmd_synth, "write synthetic raw input files")
    p.add_argument("--kind", required=True, choices=("fixture", "roles", "trust"))
    p.add_argument("--seed", type=int)
    return parser


def _thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CommandError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        limit = _thread_limit()
        run = Run(args.command, args.out, argv)
        with threadpool_limits(limits=limit):
            args.func(args, run)
        run.manifest()
    except (CommandError, FormatError, ContainerError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gbrec {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
