"""``collabvpr`` command-line entry point.

Exit codes: 0 success, 1 property failure, 2 I/O error, 3 shape/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fileio
from .aggregation import DimensionMismatchError, InsufficientSamplesError, aggregate, fit_codebook_detailed
from .config import ConfigError, RunConfig, derive_seed, load_config, parse_overrides
from .fusion import DegenerateEgoError, FusionMode, fuse_descriptors
from .retrieval import build_database, evaluate, query_reordering, query_topk
from .selfcheck import run_selfcheck
from .simworld import World, distance_sweep, generate_world, run_experiment, sweep_csv, training_set
from .training import TrainingDivergedError, compare_initialization, train

EXIT_OK, EXIT_PROPERTY, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3

log = logging.getLogger("collabvpr")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing required {what} path", EXIT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_IO)
    return p


def _require_output(cfg: RunConfig) -> Path:
    if cfg.output is None:
        raise CliError("missing output path (--out)", EXIT_CONFIG)
    out = Path(cfg.output)
    if out.parent and not out.parent.exists():
        raise CliError(f"output directory does not exist: {out.parent}", EXIT_IO)
    return out


def _write_text(path: Path, cfg: RunConfig, body: str) -> None:
    path.write_text(f"# config: {cfg.header()}\n" + body)


def _write_sidecar(path: Path, cfg: RunConfig, **extra) -> None:
    meta = {"config": cfg.to_dict(), **extra}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _load_world(cfg: RunConfig) -> World:
    return fileio.load_world(_require_file(cfg.world, "world"))


def _reference_items(cfg: RunConfig):
    """(id, pose, LocalDescriptorSet) for the references of a world dir or a descriptors dir + pose CSV."""
    if cfg.world is not None:
        world = _load_world(cfg)
        return [(r.place_id, r.pose, r.descriptors) for r in world.references]
    desc_dir = _require_file(cfg.descriptors, "descriptor directory")
    poses = fileio.read_poses_csv(_require_file(cfg.poses, "pose CSV"))
    items = []
    for pid, pose in poses.items():
        items.append((pid, pose, fileio.read_descriptors(_require_file(desc_dir / f"{pid}.cvpd", "descriptor file"))))
    return items


def _training_samples(cfg: RunConfig):
    if cfg.world is not None:
        return [r.descriptors for r in _load_world(cfg).references]
    desc_dir = _require_file(cfg.descriptors, "descriptor directory")
    files = sorted(desc_dir.glob("*.cvpd")) if desc_dir.is_dir() else [desc_dir]
    if not files:
        raise CliError(f"no .cvpd files in {desc_dir}", EXIT_IO)
    return [fileio.read_descriptors(f) for f in files]


def _retrieve(cfg: RunConfig, reordering: bool):
    db = fileio.read_database(_require_file(cfg.database, "database"))
    cb = fileio.read_codebook(_require_file(cfg.codebook, "codebook"))
    world = _load_world(cfg)
    k_top = max(cfg.k_top, max(cfg.ks))
    results = []
    for group in world.queries:
        descs = [aggregate(a.descriptors, cb, cfg.aggregation) for a in group.agents]
        if reordering:
            res = query_reordering(db, descs, k_top)
        else:
            res = query_topk(db, fuse_descriptors(descs[0], descs[1:], cfg.fusion), k_top)
        results.append((group.ego.pose, res))
    return db, results


# ---------------------------------------------------------------------------
# commands


def cmd_world(cfg: RunConfig, args) -> int:
    out = Path(cfg.output or cfg.world or "")
    if not str(out):
        raise CliError("missing output directory (--out)", EXIT_CONFIG)
    world = generate_world(cfg.scene_config())
    fileio.save_world(world, out)
    _write_sidecar(out / "run_config", cfg)
    print(f"world: {len(world.references)} references, {len(world.queries)} query groups -> {out}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args) -> int:
    out = _require_output(cfg)
    samples = _training_samples(cfg)
    fit = fit_codebook_detailed(samples, cfg.num_clusters, derive_seed(cfg.seed, "codebook"), cfg.softness, cfg.kmeans_max_iter)
    fileio.write_codebook(out, fit.codebook)
    _write_sidecar(out, cfg, inertia=fit.inertia, iterations=fit.iterations)
    print(f"K={fit.codebook.num_clusters} d={fit.codebook.dim} inertia={fit.inertia:.6f} iterations={fit.iterations}")
    return EXIT_OK


def cmd_build_db(cfg: RunConfig, args) -> int:
    out = _require_output(cfg)
    cb = fileio.read_codebook(_require_file(cfg.codebook, "codebook"))
    items = _reference_items(cfg)
    db = build_database((pid, pose, aggregate(s, cb, cfg.aggregation)) for pid, pose, s in items)
    fileio.write_database(out, db)
    _write_sidecar(out, cfg)
    print(f"database: {len(db)} entries of length {db.dim}")
    return EXIT_OK


def cmd_query(cfg: RunConfig, args) -> int:
    out = _require_output(cfg)
    _, results = _retrieve(cfg, args.reordering)
    lines = ["query,rank,place_id,score,x,y"]
    for q, (_, res) in enumerate(results):
        for rank, r in enumerate(res.ranked[: cfg.k_top], start=1):
            lines.append(f"{q},{rank},{r.place_id},{r.score:.17g},{r.pose[0]:.17g},{r.pose[1]:.17g}")
    _write_text(out, cfg, "\n".join(lines) + "\n")
    print(f"wrote {len(results)} ranked lists to {out}")
    return EXIT_OK


def eval_table(report) -> str:
    lines = ["k,correct,recall,error"]
    lines += [f"{k},{c},{r:.17g},{e:.17g}" for k, c, r, e in report.as_rows()]
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.output) if cfg.output else None
    if out is not None:
        _require_output(cfg)
    db, results = _retrieve(cfg, args.reordering)
    report = evaluate(db, results, cfg.threshold_m, cfg.ks)
    label = "reordering" if args.reordering else cfg.fusion
    print(f"mode={label} queries={report.num_queries} threshold={report.threshold_m:g}m")
    for k, c, r, e in report.as_rows():
        print(f"  R@{k}={r:.3f}  E@{k}={e:.3f}  ({c}/{report.num_queries})")
    if out is not None:
        _write_text(out, cfg, eval_table(report))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _require_output(cfg)
    tcfg = cfg.train_config()
    init_path = cfg.train.get("init_codebook") or cfg.codebook
    world = _load_world(cfg)
    data = training_set(world, cfg.threshold_m)
    if init_path is not None:
        init = fileio.read_codebook(_require_file(init_path, "initial codebook"))
    else:
        init = fit_codebook_detailed(
            [r.descriptors for r in world.references], cfg.num_clusters, derive_seed(cfg.seed, "codebook"), cfg.softness, cfg.kmeans_max_iter
        ).codebook
    if args.compare_init:
        cmp = compare_initialization(tcfg, data, init)
        for tag, res in (("single", cmp.single_agent), ("from-single", cmp.from_single), ("fresh", cmp.fresh)):
            _write_text(Path(f"{out}.{tag}.trace.csv"), cfg, res.trace_csv())
        print(cmp.summary())
        result = cmp.from_single
    else:
        result = train(tcfg, data, init)
    fileio.write_codebook(out, result.codebook)
    _write_sidecar(out, cfg)
    trace_path = Path(args.trace) if args.trace else Path(str(out) + ".trace.csv")
    _write_text(trace_path, cfg, result.trace_csv())
    for row in result.trace:
        print(f"epoch {row.epoch}: mean_loss={row.mean_loss:.6f} lr={row.lr:g}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = _require_output(cfg)
    scene = cfg.scene_config()
    world = generate_world(scene)
    cb = fit_codebook_detailed(
        [r.descriptors for r in world.references], cfg.num_clusters, derive_seed(cfg.seed, "codebook"), cfg.softness, cfg.kmeans_max_iter
    ).codebook
    exp = cfg.experiment_config()
    result = run_experiment(world, cb, exp)
    for mode, report in result.reports.items():
        print(f"{mode:12s} " + " ".join(f"R@{k}={report.recall_at[k]:.3f}" for k in exp.ks))
    rows = distance_sweep(scene, cfg.sweep_distances, cb, exp)
    table = sweep_csv(rows, exp.ks)
    _write_text(out, cfg, table)
    print(table, end="")
    return EXIT_OK


def cmd_selfcheck(cfg: RunConfig, args) -> int:
    results = run_selfcheck(derive_seed(cfg.seed, "selfcheck") % 2**32, args.debug_skip_normalization)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed properties: " + ", ".join(failed))
        return EXIT_PROPERTY
    print("all properties hold")
    return EXIT_OK


COMMANDS = {
    "world": (cmd_world, "generate a seeded synthetic multi-agent world directory"),
    "fit": (cmd_fit, "fit a k-means codebook and write a CVPC file"),
    "build-db": (cmd_build_db, "aggregate reference views into a CVDB database"),
    "query": (cmd_query, "rank database entries for every query group"),
    "eval": (cmd_eval, "report recall@K / error@K for a fusion mode"),
    "train": (cmd_train, "triplet-train the codebook through the fusion pipeline"),
    "sweep": (cmd_sweep, "run all fusion modes over a collaborator-distance sweep"),
    "selfcheck": (cmd_selfcheck, "run the constraint, oracle and gradient checks"),
}

# command-line flag -> config key
_FLAG_KEYS = {
    "seed": "seed",
    "k": "num_clusters",
    "softness": "softness",
    "aggregation": "aggregation",
    "fusion": "fusion",
    "k_top": "k_top",
    "threshold": "threshold_m",
    "radius": "radius_m",
    "world": "world",
    "codebook": "codebook",
    "db": "database",
    "descriptors": "descriptors",
    "poses": "poses",
    "out": "output",
}


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="collabvpr", description="Collaborative visual place recognition toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help=f"JSON config file (default: ${'{'}COLLABVPR_CONFIG{'}'})")
        p.add_argument("--preset", help="built-in config preset (occlusion, toy-train)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name in ("fit", "train", "sweep"):
            p.add_argument("-k", "--k", type=int, help="number of clusters")
        if name in ("fit", "build-db", "query", "eval", "train", "sweep"):
            p.add_argument("--softness", type=float)
        if name in ("build-db", "query", "eval", "sweep"):
            p.add_argument("--aggregation", choices=("hard", "soft"))
        if name in ("query", "eval", "train", "sweep"):
            p.add_argument("--fusion", choices=[m.value for m in FusionMode])
            p.add_argument("--threshold", type=float, help="correct-retrieval distance M in meters")
        if name in ("query", "eval"):
            p.add_argument("--k-top", dest="k_top", type=int)
            p.add_argument("--reordering", action="store_true", help="sum per-agent scores instead of fusing")
        if name in ("world", "sweep"):
            p.add_argument("--radius", type=float, help="communication radius in meters")
        if name in ("world", "fit", "build-db", "query", "eval", "train"):
            p.add_argument("--world")
        if name in ("build-db", "query", "eval", "train"):
            p.add_argument("--codebook")
        if name in ("query", "eval"):
            p.add_argument("--db")
        if name in ("fit", "build-db"):
            p.add_argument("--descriptors", help="directory of .cvpd files (named <id>.cvpd for build-db)")
        if name == "build-db":
            p.add_argument("--poses", help="reference pose CSV with header id,x,y")
        if name == "train":
            p.add_argument("--trace", help="loss trace CSV path (default: <out>.trace.csv)")
            p.add_argument(
                "--compare-init",
                action="store_true",
                help="also train single-agent first and compare multi-agent runs from that init vs fresh",
            )
        if name == "selfcheck":
            p.add_argument("--debug-skip-normalization", action="store_true", help="negative control: fuse without renormalizing")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, args.preset, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = _config_from_args(args)
        return handler(cfg, args)
    except CliError as exc:
        print(f"collabvpr: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, PermissionError, IsADirectoryError, fileio.FileFormatError, OSError) as exc:
        print(f"collabvpr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DimensionMismatchError, InsufficientSamplesError, DegenerateEgoError, ValueError) as exc:
        print(f"collabvpr: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"collabvpr: training aborted: {exc}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
