"""``latent-states`` command line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 usage or configuration error,
3 bad input data, 4 numerical or degenerate-input failure inside a stage.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, pipeline, synth
from ._validation import ConfigError, DegenerateInputError
from .cluster import parse_k_range
from .ingest import IngestError
from .reduce import AffinityError

log = logging.getLogger("latent_states")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3, 4
THREADS_ENV = "LATENT_STATES_THREADS"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DegenerateInputError, AffinityError, FloatingPointError, np.linalg.LinAlgError,
                        AssertionError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (IngestError, FileNotFoundError, ValueError, KeyError)):
        return EXIT_INPUT
    return EXIT_UNEXPECTED


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in _csv_list(text)]


def _beside(path: str, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _manifest(args, inputs: dict, out: str, is_dir: bool = False) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    m = pipeline.manifest_for(args.command, config, inputs, {"seed": getattr(args, "seed", None)})
    m.finished = pipeline._now()
    target = Path(out) / pipeline.MANIFEST if is_dir else Path(str(out) + ".manifest.json")
    if is_dir:
        m.outputs = pipeline.output_digests(out)
    elif Path(out).is_file():
        from ._io import file_digest
        m.outputs = {Path(out).name: file_digest(out)}
    m.write(target)


# -- subcommand handlers ----------------------------------------------------------

def cmd_ingest(a):
    report = pipeline.run_ingest(a.events, a.clinical, a.out, a.tz_offset, a.lenient)
    log.info("ingested %s events over %s participant-days", report.get("events"), report.get("participant_days"))
    _manifest(a, {"events": a.events, "clinical": a.clinical}, a.out, is_dir=True)


def cmd_preprocess(a):
    n = pipeline.run_preprocess(a.cohort, a.out, a.window_min)
    log.info("rectified %d days", n)
    _manifest(a, {"cohort": Path(a.cohort) / "cohort.jsonl"}, a.out)


def cmd_embed(a):
    info = pipeline.run_embed(a.days, a.out, a.builtin_d, a.import_path)
    log.info("embedded %d days in %d dimensions", info["days"], info["dim"])
    _manifest(a, {"days": a.days, "import": a.import_path}, a.out)


def cmd_triplets(a):
    rep = pipeline.run_triplets(a.days, a.embeddings, a.out, a.window_days, a.n, a.margin, a.seed,
                                parse_k_range(a.precluster_k))
    log.info("generated %d triplets, mean loss %s", rep["generated"], rep["mean_loss"])
    _manifest(a, {"days": a.days, "embeddings": a.embeddings}, a.out)


def cmd_reduce(a):
    info = pipeline.run_reduce(a.embeddings, a.out, a.perplexity, a.iters, a.learning_rate, a.seed,
                               a.kl_trace or _beside(a.out, ".kl.csv"))
    log.info("t-SNE final KL %.6g", info["final_kl"])
    _manifest(a, {"embeddings": a.embeddings}, a.out)


def cmd_cluster(a):
    k_range = parse_k_range(a.select_k) if a.select_k else None
    dump = pipeline.run_cluster(a.points, a.out, a.model or _beside(a.out, ".model.json"), k=a.k,
                                k_range=k_range, seed=a.seed, n_init=a.n_init)
    log.info("k=%d, silhouettes %s", dump["k"], dump["silhouettes"])
    _manifest(a, {"points": a.points}, a.out)


def cmd_states(a):
    n = pipeline.run_states(a.points, a.labels, a.out, a.transitions or _beside(a.out, ".transitions.json"),
                            a.k, a.alpha, a.threshold_quantile, a.mode, a.period_months)
    log.info("wrote %d state vectors", n)
    _manifest(a, {"points": a.points, "labels": a.labels}, a.out)


def cmd_analyze(a):
    summary = pipeline.run_analyze(a.states, a.clinical, a.out, a.period_months, parse_k_range(a.k_range), a.seed)
    log.info("analysed %d participants over %d periods", summary["participants"], summary["periods"])
    _manifest(a, {"states": a.states, "clinical": a.clinical}, a.out, is_dir=True)


def cmd_predict(a):
    rows = pipeline.run_predict(a.days, a.states, a.clinical, a.out, a.json or _beside(a.out, ".json"),
                                sets=_csv_list(a.sets), targets=_csv_list(a.targets), windows=_int_list(a.windows),
                                lambdas=_float_list(a.lambdas), seed=a.seed, n_resamples=a.n_resamples,
                                points_path=a.points, labels_path=a.labels)
    log.info("wrote %d report rows", len(rows))
    _manifest(a, {"days": a.days, "states": a.states, "clinical": a.clinical,
                  "points": a.points, "labels": a.labels}, a.out)


def cmd_synth(a):
    archetypes = synth.load_archetypes(a.archetypes)
    start = dt.date.fromisoformat(a.start_date)
    cohort = synth.generate_cohort(a.participants, archetypes, a.days, a.seed, start)
    paths = synth.write_cohort_files(cohort, a.out)
    log.info("wrote %d events for %d participants", len(cohort.events), a.participants)
    _manifest(a, {"archetypes": a.archetypes if Path(a.archetypes).is_file() else None}, a.out, is_dir=True)
    return paths


def _resolve_paths(cfg: dict, base: Path) -> dict:
    inp = dict(cfg.get("input", {}))
    for key in ("events", "clinical"):
        if isinstance(inp.get(key), str):
            inp[key] = str((base / inp[key]).resolve())
    cfg = {**cfg, "input": inp}
    emb = cfg.get("embed")
    if isinstance(emb, dict) and isinstance(emb.get("import"), str):
        cfg["embed"] = {**emb, "import": str((base / emb["import"]).resolve())}
    return cfg


def cmd_pipeline(a):
    if a.replay:
        m = pipeline.replay(a.replay, a.out, log.info)
    else:
        if not a.config:
            raise ConfigError("pipeline needs --config or --replay")
        cfg = _resolve_paths(pipeline.load_config(a.config), Path(a.config).resolve().parent)
        if a.seed is not None:
            cfg["seed"] = a.seed
        m = pipeline.run_pipeline(cfg, a.out, log.info)
    log.info("pipeline finished; %d output files", len(m.outputs))


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-states", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate and segment raw events")
    s.add_argument("--events", required=True)
    s.add_argument("--clinical")
    s.add_argument("--tz-offset", default="+00:00")
    s.add_argument("--lenient", action="store_true", help="skip bad rows instead of failing")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", help="rectify days into fixed slots")
    s.add_argument("--cohort", required=True, help="ingest output directory")
    s.add_argument("--window-min", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("embed", help="embed rectified days")
    s.add_argument("--days", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--builtin-d", type=int, default=384)
    g.add_argument("--import", dest="import_path")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("triplets", help="sample triplets and report their loss")
    s.add_argument("--days", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--window-days", type=int, default=30)
    s.add_argument("--n", type=int, default=50000)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--precluster-k", default="4:7", help="k range for the one-hot pre-clustering")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="triplet report JSON")
    s.set_defaults(func=cmd_triplets)

    s = sub.add_parser("reduce", help="t-SNE to two dimensions")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--learning-rate", type=float, default=200.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kl-trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("cluster", help="k-means on t-SNE points")
    s.add_argument("--points", required=True, help="t-SNE points CSV or an embedding CSV")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--select-k", help="range lo:hi chosen by silhouette")
    s.add_argument("--n-init", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("states", help="transition matrices and PageRank state vectors")
    s.add_argument("--points", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--alpha", type=float, default=0.85)
    s.add_argument("--threshold-quantile", type=float, default=0.10)
    s.add_argument("--mode", choices=("proximity", "temporal"), default="proximity")
    s.add_argument("--period-months", type=int, default=3)
    s.add_argument("--transitions")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_states)

    s = sub.add_parser("analyze", help="period heatmaps, similarity and correlations")
    s.add_argument("--states", required=True)
    s.add_argument("--clinical")
    s.add_argument("--period-months", type=int, default=3)
    s.add_argument("--k-range", default="2:5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("predict", help="ridge LOOCV over feature sets, targets and windows")
    s.add_argument("--days", required=True)
    s.add_argument("--states", required=True)
    s.add_argument("--clinical", required=True)
    s.add_argument("--points", help="with --labels, recompute state vectors per analysis window")
    s.add_argument("--labels")
    s.add_argument("--sets", default="baseline,state,characteristics,state+characteristics")
    s.add_argument("--targets", default="mmse,adascog,delta_mmse,delta_adascog")
    s.add_argument("--windows", default="7,15,30,90,180")
    s.add_argument("--lambdas", default="0.01,0.1,1,10")
    s.add_argument("--n-resamples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--participants", type=int, default=30)
    s.add_argument("--archetypes", default="default3.json")
    s.add_argument("--days", type=int, default=180)
    s.add_argument("--start-date", default="2024-01-01")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="run every stage from a TOML config")
    s.add_argument("--config")
    s.add_argument("--replay", help="manifest of an earlier run to reproduce")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            args.func(args)
    except Exception as exc:  # mapped to a stable exit code
        code = exit_code_for(exc)
        print(f"latent-states {args.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_UNEXPECTED:
            log.exception("unexpected failure")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
