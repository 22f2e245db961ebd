"""Stage runners shared by the CLI subcommands and the one-shot pipeline.

Every stage reads its inputs from files and writes its outputs to files, so
the pipeline is just the stages chained through a run directory.  Run
configuration is a TOML file validated against :data:`CONFIG_SCHEMA`.
"""

from __future__ import annotations

import datetime as dt
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import __version__, _io
from ._validation import ConfigError
from .analyze import (STATES_BY_PERIOD, build_period_grid, latest_clinical,
                      similarity_filename, write_analysis)
from .cluster import KMeans, parse_k_range, select_k, silhouette
from .embed import (BuiltinEmbedder, corpus_loss, count_triplet_violations, import_embeddings,
                    select_triplets, write_embeddings)
from .ingest import (ClinicalRecord, ingest_files, parse_clinical, parse_tz_offset,
                     read_cohort, write_cohort)
from .predict import (DEFAULT_LAMBDAS, DEFAULT_WINDOWS, FeatureSetSpec, period_state_source,
                      run_experiment_grid, window_state_source, write_report)
from .preprocess import OneHotDayEncoder, read_days, rectify_cohort, write_days
from .reduce import TSNE, read_points, write_kl_trace, write_points
from .transition import compute_state_vectors, read_states, transitions_json, write_states

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# -- individual stages --------------------------------------------------------

def run_ingest(events, clinical, out_dir, tz_offset: str = "+00:00", lenient: bool = False) -> dict:
    index, report = ingest_files(events, clinical, parse_tz_offset(tz_offset), lenient=lenient)
    write_cohort(index, out_dir, report)
    return report


def run_preprocess(cohort_dir, out_path, window_minutes: int = 20) -> int:
    days = rectify_cohort(read_cohort(cohort_dir), window_minutes)
    write_days(out_path, days)
    return len(days)


def run_embed(days_path, out_path, dim: int = 384, import_path=None) -> dict:
    days = read_days(days_path)
    if import_path is not None:
        corpus = import_embeddings(import_path)
        want = {s.key for s in days}
        missing = sorted(want - set(corpus.keys))
        if missing:
            pid, d = missing[0]
            raise ValueError(f"imported embeddings lack {len(missing)} day(s), e.g. {pid} {d}")
        n_zero = int(np.sum(~corpus.values.any(axis=1)))
    else:
        embedder = BuiltinEmbedder(dim=dim)
        corpus = embedder.embed_corpus(days)
        n_zero = embedder.n_zero_
    write_embeddings(out_path, corpus)
    return {"days": len(corpus), "dim": corpus.dim, "zero_vectors": n_zero}


def run_triplets(days_path, embeddings_path, out_path, window_days: int = 30, n: int = 50000,
                 margin: float = 1.0, seed: int = 0, precluster_k: Sequence[int] = (4, 5, 6, 7)) -> dict:
    """Pre-cluster one-hot days (k by silhouette), sample triplets and score them on the embeddings."""
    days = read_days(days_path)
    onehot = OneHotDayEncoder().fit_transform(days)
    distinct = len({s.slots for s in days})
    k_range = [k for k in precluster_k if 2 <= k < min(distinct, len(days))]
    if not k_range:
        raise ValueError(f"triplet pre-clustering needs more than {min(precluster_k)} distinct days, got {distinct}")
    k, scores, models = select_k(onehot, k_range, seed=_io.derive_seed(seed, "precluster"), n_init=3)
    labels = models[k].labels_
    keys = [s.key for s in days]
    triplets, skipped = select_triplets(keys, labels, window_days, n, _io.derive_seed(seed, "sample"))
    report = {"requested": n, "generated": len(triplets), "skipped_anchors": skipped,
              "precluster_k": k, "precluster_silhouettes": {str(a): b for a, b in scores.items()},
              "window_days": window_days, "margin": margin,
              **count_triplet_violations(triplets, keys, labels, window_days)}
    report["mean_loss"] = corpus_loss(triplets, import_embeddings(embeddings_path), margin) if triplets else None
    _io.write_json(out_path, report)
    return report


def run_reduce(embeddings_path, out_path, perplexity: float = 30.0, iters: int = 1000,
               learning_rate: float = 200.0, seed: int = 0, kl_path=None) -> dict:
    corpus = import_embeddings(embeddings_path)
    model = TSNE(perplexity=perplexity, n_iter=iters, learning_rate=learning_rate, random_state=seed)
    Y = model.fit_transform(corpus.values)
    write_points(out_path, corpus.keys, Y)
    if kl_path is not None:
        write_kl_trace(kl_path, model.kl_trace_)
    return {"points": len(corpus), "final_kl": model.kl_trace_[-1][1]}


def read_labels(path):
    header, rows = _io.read_csv(path)
    if header[:3] != ["participant_id", "date", "cluster"]:
        raise ValueError("labels file must have columns participant_id,date,cluster")
    return [(r[0], dt.date.fromisoformat(r[1])) for r in rows], np.array([int(r[2]) for r in rows], dtype=np.int64)


def read_cluster_input(path):
    """Day vectors to cluster: a t-SNE points file or an embedding file, told apart by header.

    Returns ``(keys, vectors, kind)`` with ``kind`` either ``"tsne_points"`` or ``"embeddings"``.
    """
    header, _ = _io.read_csv(path)
    if header[2:] == ["x", "y"]:
        keys, Y = read_points(path)
        return keys, Y, "tsne_points"
    corpus = import_embeddings(path)
    return corpus.keys, corpus.values, "embeddings"


def run_cluster(points_path, out_path, model_path=None, k: int | None = 5, k_range: Sequence[int] | None = None,
                seed: int = 0, n_init: int = 10) -> dict:
    keys, Y, kind = read_cluster_input(points_path)
    if k_range:
        k_best, scores, models = select_k(Y, k_range, seed=seed, n_init=n_init)
        model = models[k_best]
    else:
        model = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(Y)
        k_best, scores = k, {k: silhouette(Y, model.labels_)}
    _io.write_csv(out_path, ["participant_id", "date", "cluster"],
                  ([p, d.isoformat(), int(c)] for (p, d), c in zip(keys, model.labels_)))
    dump = {"input_kind": kind, "input_dim": int(Y.shape[1]), "k": int(k_best), "centroids": model.cluster_centers_, "inertia": model.inertia_,
            "iterations": model.n_iter_, "silhouettes": {str(a): b for a, b in scores.items()},
            "sizes": np.bincount(model.labels_, minlength=k_best)}
    if model_path is not None:
        _io.write_json(model_path, dump)
    return dump


def _aligned_labels(points_path, labels_path):
    keys, Y = read_points(points_path)
    lkeys, labels = read_labels(labels_path)
    if lkeys != keys:
        where = dict(zip(lkeys, labels))
        missing = [kk for kk in keys if kk not in where]
        if missing:
            raise ValueError(f"labels file lacks {len(missing)} day(s) present in points, e.g. {missing[0]}")
        labels = np.array([where[kk] for kk in keys], dtype=np.int64)
    return keys, Y, labels


def run_states(points_path, labels_path, out_path, transitions_path=None, k: int | None = None,
               alpha: float = 0.85, threshold_quantile: float = 0.10, mode: str = "proximity",
               period_months: int = 3) -> int:
    keys, Y, labels = _aligned_labels(points_path, labels_path)
    k = int(k if k is not None else labels.max() + 1)
    vectors = compute_state_vectors(keys, Y, labels, k, period_months=period_months, alpha=alpha,
                                    threshold_quantile=threshold_quantile, mode=mode)
    write_states(out_path, vectors)
    if transitions_path is not None:
        _io.write_json(transitions_path, transitions_json(vectors))
    return len(vectors)


def load_clinical(path) -> dict[str, list[ClinicalRecord]]:
    """Clinical records from a CSV or from an ingest output (``clinical.jsonl``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "clinical.jsonl"
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        recs = [ClinicalRecord.from_json(r) for r in _io.read_jsonl(path)]
    else:
        with open(path, "rb") as fh:
            recs = parse_clinical(fh)
    out: dict[str, list[ClinicalRecord]] = {}
    for r in recs:
        out.setdefault(r.participant_id, []).append(r)
    return out


PLOT_STATES = "plot_states.csv"
PLOT_SIMILARITY = "plot_similarity.csv"


def emit_plot_data(analysis_dir, out_dir=None) -> dict[str, int]:
    """Long-format heatmap tables from the analysis outputs."""
    analysis_dir = Path(analysis_dir)
    out_dir = Path(out_dir) if out_dir is not None else analysis_dir
    src = analysis_dir / STATES_BY_PERIOD
    if not src.exists():
        raise FileNotFoundError(f"missing analysis output {src}")
    # cells are copied verbatim from the analysis files so values match exactly
    header, rows = _io.read_csv(src)
    states = header[3:]
    long_states = [[r[0], r[2], s, v] for r in rows for s, v in zip(states, r[3:])]
    _io.atomic_write_text(out_dir / PLOT_STATES, _io.csv_text(["period", "participant_id", "state", "value"], long_states))
    sims = []
    for start in sorted({r[0] for r in rows}):
        path = analysis_dir / similarity_filename(dt.date.fromisoformat(start))
        if not path.exists():
            continue
        sh, srows = _io.read_csv(path)
        sims.extend([start, r[0], j, v] for r in srows for j, v in zip(sh[1:], r[1:]))
    _io.atomic_write_text(out_dir / PLOT_SIMILARITY, _io.csv_text(["period", "i", "j", "similarity"], sims))
    return {"state_rows": len(long_states), "similarity_rows": len(sims)}


def run_analyze(states_path, clinical_path, out_dir, period_months: int = 3,
                k_range: Sequence[int] = (2, 3, 4, 5), seed: int = 0) -> dict:
    vectors = read_states(states_path)
    grid = build_period_grid(vectors, period_months)
    clinical = load_clinical(clinical_path) if clinical_path is not None else {}
    summary = write_analysis(grid, clinical, out_dir, k_range, seed)
    summary["plot_data"] = emit_plot_data(out_dir)
    return summary


def run_predict(days_path, states_path, clinical_path, out_csv, out_json=None, *,
                sets: Sequence[str] = ("baseline", "state", "characteristics", "state+characteristics"),
                targets: Sequence[str] = ("mmse", "adascog", "delta_mmse", "delta_adascog"),
                windows: Sequence[int] = DEFAULT_WINDOWS, lambdas=DEFAULT_LAMBDAS, seed: int = 0,
                n_resamples: int = 1000, points_path=None, labels_path=None, state_kwargs=None) -> list:
    days = read_days(days_path)
    by_pid: dict = {}
    for s in days:
        by_pid.setdefault(s.participant_id, []).append(s)
    rw_seed = _io.derive_seed(seed, "random_word")
    specs = [FeatureSetSpec.parse(s, random_word_seed=rw_seed) for s in sets]
    if points_path is not None and labels_path is not None:
        keys, Y, labels = _aligned_labels(points_path, labels_path)
        source = window_state_source(keys, Y, labels, int(labels.max()) + 1, **(state_kwargs or {}))
        state_origin = "recomputed over each analysis window from points and labels"
    else:
        source = period_state_source(read_states(states_path))
        state_origin = "mean of stored period vectors overlapping each analysis window"
    clinical = latest_clinical(load_clinical(clinical_path))
    rows = run_experiment_grid(by_pid, source, clinical, specs, targets, windows, lambdas, n_resamples,
                               _io.derive_seed(seed, "bootstrap"))
    meta = {"ci_method": f"percentile bootstrap over LOOCV fold errors, {n_resamples} resamples",
            "lambda_grid": list(lambdas) if not np.isscalar(lambdas) else [lambdas],
            "lambda_selection": "exact leave-one-out on each training fold",
            "standardization": "training-fold mean and population sd; constant columns dropped",
            "clinical_target": "latest assessment per participant",
            "state_features": state_origin, "random_word_seed": rw_seed}
    write_report(out_csv, out_json, rows, meta)
    return rows


# -- configuration ---------------------------------------------------------------

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_STR = {"type": "string"}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed", "input"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "input": {"type": "object", "required": ["events"], "additionalProperties": False,
                  "properties": {"events": _STR, "clinical": _STR, "tz_offset": _STR,
                                 "lenient": {"type": "boolean"}}},
        "preprocess": {"type": "object", "additionalProperties": False,
                       "properties": {"window_minutes": _POS_INT}},
        "embed": {"type": "object", "additionalProperties": False,
                  "properties": {"dim": _POS_INT, "import": _STR}},
        "triplets": {"type": "object", "additionalProperties": False,
                     "properties": {"enabled": {"type": "boolean"}, "window_days": _POS_INT, "n": _POS_INT,
                                    "margin": _NUM, "precluster_k": _STR}},
        "reduce": {"type": "object", "additionalProperties": False,
                   "properties": {"perplexity": _NUM, "iters": {"type": "integer", "minimum": 0},
                                  "learning_rate": _NUM}},
        "cluster": {"type": "object", "additionalProperties": False,
                    "properties": {"k": {"type": "integer", "minimum": 2}, "select_k": _STR, "n_init": _POS_INT}},
        "states": {"type": "object", "additionalProperties": False,
                   "properties": {"alpha": _NUM, "threshold_quantile": _NUM,
                                  "mode": {"enum": ["proximity", "temporal"]}, "period_months": _POS_INT}},
        "analyze": {"type": "object", "additionalProperties": False,
                    "properties": {"k_range": _STR}},
        "predict": {"type": "object", "additionalProperties": False,
                    "properties": {"enabled": {"type": "boolean"},
                                   "sets": {"type": "array", "items": _STR, "minItems": 1},
                                   "targets": {"type": "array", "items": _STR, "minItems": 1},
                                   "windows": {"type": "array", "items": _POS_INT, "minItems": 1},
                                   "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0},
                                               "minItems": 1},
                                   "n_resamples": _POS_INT}},
    },
}

DEFAULTS = {
    "input": {"tz_offset": "+00:00", "lenient": False},
    "preprocess": {"window_minutes": 20},
    "embed": {"dim": 384},
    "triplets": {"enabled": True, "window_days": 30, "n": 50000, "margin": 1.0, "precluster_k": "4:7"},
    "reduce": {"perplexity": 30.0, "iters": 1000, "learning_rate": 200.0},
    "cluster": {"k": 5, "n_init": 10},
    "states": {"alpha": 0.85, "threshold_quantile": 0.10, "mode": "proximity", "period_months": 3},
    "analyze": {"k_range": "2:5"},
    "predict": {"enabled": True, "sets": ["baseline", "state", "characteristics", "state+characteristics"],
                "targets": ["mmse", "adascog", "delta_mmse", "delta_adascog"],
                "windows": list(DEFAULT_WINDOWS), "lambdas": list(DEFAULT_LAMBDAS), "n_resamples": 1000},
}


class SchemaError(ConfigError):
    pass


def validate_config(cfg: dict) -> dict:
    """Validate and fill defaults; errors name the offending key path."""
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = list(e.path)
        if e.validator == "required":
            missing = [r for r in e.validator_value if r not in e.instance]
            path += missing[:1]
        elif e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            path += extra[:1]
        raise SchemaError(f"config error at '{'.'.join(map(str, path)) or '<root>'}': {e.message}")
    out = {"seed": cfg["seed"]}
    for section, defaults in DEFAULTS.items():
        out[section] = {**defaults, **cfg.get(section, {})}
    out["input"] = {**DEFAULTS["input"], **cfg["input"]}
    return out


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"cannot parse config {path}: {exc}") from None


# -- manifest and orchestration --------------------------------------------------

MANIFEST = "run_manifest.json"


@dataclass
class RunManifest:
    tool_version: str
    subcommand: str
    config: dict
    inputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)

    def write(self, path) -> None:
        _io.write_json(path, asdict(self))

    @classmethod
    def read(cls, path) -> "RunManifest":
        import json
        return cls(**json.loads(Path(path).read_text()))


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def manifest_for(subcommand: str, config: dict, inputs: dict[str, object], seeds: dict | None = None) -> RunManifest:
    digests = {name: {"path": str(p), "sha256": _io.file_digest(p)}
               for name, p in inputs.items() if p is not None and Path(p).is_file()}
    return RunManifest(__version__, subcommand, config, digests, seeds or {}, _now())


def output_digests(root) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): _io.file_digest(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


STAGES = ("ingest", "preprocess", "embed", "triplets", "reduce", "cluster", "states", "analyze", "predict")


def stage_seeds(root: int) -> dict[str, int]:
    return {s: _io.derive_seed(root, s) for s in ("triplets", "reduce", "cluster", "analyze", "predict")}


def run_pipeline(cfg: dict, out_dir, log=None) -> RunManifest:
    """Run every stage into ``out_dir`` and write the manifest last."""
    cfg = validate_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = stage_seeds(cfg["seed"])
    inp = cfg["input"]
    manifest = manifest_for("pipeline", cfg, {"events": inp["events"], "clinical": inp.get("clinical"),
                                              "embeddings": cfg["embed"].get("import")}, seeds)
    clinical = inp.get("clinical")
    f = {
        "cohort": out / "cohort", "days": out / "days.jsonl", "embeddings": out / "embeddings.csv",
        "triplets": out / "triplets.json", "points": out / "points.csv", "kl": out / "kl_trace.csv",
        "labels": out / "clusters.csv", "model": out / "cluster_model.json", "states": out / "states.csv",
        "transitions": out / "transitions.json", "analysis": out / "analysis",
        "predictions": out / "predictions.csv", "predictions_json": out / "predictions.json",
    }
    st = cfg["states"]
    state_kwargs = {"alpha": st["alpha"], "threshold_quantile": st["threshold_quantile"], "mode": st["mode"]}
    steps = {
        "ingest": lambda: run_ingest(inp["events"], clinical, f["cohort"], inp["tz_offset"], inp["lenient"]),
        "preprocess": lambda: run_preprocess(f["cohort"], f["days"], cfg["preprocess"]["window_minutes"]),
        "embed": lambda: run_embed(f["days"], f["embeddings"], cfg["embed"]["dim"], cfg["embed"].get("import")),
        "triplets": lambda: (run_triplets(f["days"], f["embeddings"], f["triplets"], cfg["triplets"]["window_days"],
                                          cfg["triplets"]["n"], cfg["triplets"]["margin"], seeds["triplets"],
                                          parse_k_range(cfg["triplets"]["precluster_k"]))
                             if cfg["triplets"]["enabled"] else None),
        "reduce": lambda: run_reduce(f["embeddings"], f["points"], cfg["reduce"]["perplexity"],
                                     cfg["reduce"]["iters"], cfg["reduce"]["learning_rate"], seeds["reduce"], f["kl"]),
        "cluster": lambda: run_cluster(f["points"], f["labels"], f["model"], k=cfg["cluster"]["k"],
                                       k_range=(parse_k_range(cfg["cluster"]["select_k"])
                                                if "select_k" in cfg["cluster"] else None),
                                       seed=seeds["cluster"], n_init=cfg["cluster"]["n_init"]),
        "states": lambda: run_states(f["points"], f["labels"], f["states"], f["transitions"],
                                     period_months=st["period_months"], **state_kwargs),
        "analyze": lambda: run_analyze(f["states"], f["cohort"], f["analysis"], st["period_months"],
                                       parse_k_range(cfg["analyze"]["k_range"]), seeds["analyze"]),
        "predict": lambda: (run_predict(f["days"], f["states"], f["cohort"], f["predictions"], f["predictions_json"],
                                        sets=cfg["predict"]["sets"], targets=cfg["predict"]["targets"],
                                        windows=cfg["predict"]["windows"], lambdas=cfg["predict"]["lambdas"],
                                        seed=seeds["predict"], n_resamples=cfg["predict"]["n_resamples"],
                                        points_path=f["points"], labels_path=f["labels"], state_kwargs=state_kwargs)
                            if cfg["predict"]["enabled"] and clinical else None),
    }
    for name in STAGES:
        if log:
            log(f"[{name}] running")
        try:
            steps[name]()
        except Exception as exc:
            raise StageError(name, exc) from exc
    manifest.finished = _now()
    manifest.outputs = output_digests(out)
    manifest.write(out / MANIFEST)
    return manifest


def replay(manifest_path, out_dir, log=None) -> RunManifest:
    """Rerun a pipeline from its manifest after checking the inputs are unchanged."""
    m = RunManifest.read(manifest_path)
    if m.subcommand != "pipeline":
        raise ConfigError(f"manifest records subcommand {m.subcommand!r}; only pipeline runs can be replayed")
    for name, info in m.inputs.items():
        path = Path(info["path"])
        if not path.is_file():
            raise FileNotFoundError(f"input {name} missing: {path}")
        if _io.file_digest(path) != info["sha256"]:
            raise ValueError(f"input {name} changed since the recorded run: {path}")
    return run_pipeline(m.config, out_dir, log)
