"""End-to-end runs and parameter sweeps.

A run trains the UBM, extracts supervectors, reduces them with one or more
methods (``mbn``, ``pca``, or ``raw-kmeans`` which clusters the supervectors
directly), clusters, and scores against ground truth when it is available.

Randomness comes from one master seed. The UBM, MBN and k-means seeds are
derived from it through named sub-streams; the synthetic corpus uses its own
seed when one is given and the ``"corpus"`` stream otherwise.
"""

import csv
import json
import logging
import math
import statistics
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from mbnspeaker import mbn as mbn_mod
from mbnspeaker._util import stream_seed, worker_count
from mbnspeaker.cluster import (
    KMeansConfig,
    agglomerative,
    evaluation_report,
    kmeans,
    write_assignments,
    write_report,
)
from mbnspeaker.dataio import (
    DatasetError,
    SyntheticCorpusSpec,
    encode_labels,
    generate_synthetic_corpus,
    load_dataset,
    save_matrix,
    write_dataset,
)
from mbnspeaker.mbn import MbnConfig, pca_fit, pca_transform, train_hidden_layers, train_mbn
from mbnspeaker.ubm import UbmConfig, extract_supervectors, train_ubm

logger = logging.getLogger(__name__)

METHODS = ("mbn", "pca", "raw-kmeans")
RESULT_COLUMNS = ("method", "mixtures", "em_iters", "output_dim", "depth", "seed", "nmi", "wall_seconds")


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSettings:
    """How the final labels are produced.

    ``method="kmeans"`` needs the speaker count; when ``n_clusters`` is
    ``None`` it is taken from the ground-truth labels. ``method="agglomerative"``
    stops at ``n_clusters`` or at ``distance_threshold``.
    """

    method: str = "kmeans"
    n_clusters: Optional[int] = None
    distance_threshold: Optional[float] = None
    restarts: int = 10
    max_iters: int = 300
    tol: float = 1e-8

    def __post_init__(self):
        if self.method not in ("kmeans", "agglomerative"):
            raise ConfigError(f"unknown cluster method {self.method!r}")
        if self.method == "agglomerative" and self.n_clusters is None and self.distance_threshold is None:
            raise ConfigError("agglomerative clustering needs n_clusters or distance_threshold")


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str = "run"
    manifest: Optional[str] = None
    corpus: Optional[SyntheticCorpusSpec] = None
    corpus_seed: Optional[int] = None
    ubm: UbmConfig = field(default_factory=UbmConfig)
    mbn: MbnConfig = field(default_factory=MbnConfig)
    cluster: ClusterSettings = field(default_factory=ClusterSettings)
    methods: Tuple[str, ...] = ("mbn", "pca", "raw-kmeans")
    # output dimension of the PCA baseline; defaults to the MBN output dim
    pca_output_dim: Optional[int] = None
    seed: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        if (self.manifest is None) == (self.corpus is None):
            raise ConfigError("exactly one dataset source (manifest or corpus) is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}, got {list(self.methods)}")
        object.__setattr__(self, "methods", tuple(self.methods))

    # JSON <-> config -----------------------------------------------------

    def to_json(self):
        obj = {
            "output_dir": self.output_dir,
            "manifest": self.manifest,
            "corpus": None if self.corpus is None else _corpus_json(self.corpus),
            "corpus_seed": self.corpus_seed,
            "ubm": asdict(self.ubm),
            "mbn": self.mbn.to_json(),
            "cluster": asdict(self.cluster),
            "methods": list(self.methods),
            "pca_output_dim": self.pca_output_dim,
            "seed": self.seed,
        }
        return obj

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if obj.get("corpus") is not None:
                corpus = dict(obj["corpus"])
                if "frames_per_utterance_range" in corpus:
                    corpus["frames_per_utterance_range"] = tuple(corpus["frames_per_utterance_range"])
                obj["corpus"] = SyntheticCorpusSpec(**corpus)
            if "ubm" in obj:
                obj["ubm"] = UbmConfig(**obj["ubm"])
            if "mbn" in obj:
                obj["mbn"] = MbnConfig.from_json(obj["mbn"])
            if "cluster" in obj:
                obj["cluster"] = ClusterSettings(**obj["cluster"])
            if "methods" in obj:
                obj["methods"] = tuple(obj["methods"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**obj)


def _corpus_json(spec):
    obj = asdict(spec)
    obj["frames_per_utterance_range"] = list(spec.frames_per_utterance_range)
    return obj


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return PipelineConfig.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# dataset and seeds
# ---------------------------------------------------------------------------

def effective_seeds(config):
    return {
        "corpus": config.corpus_seed if config.corpus_seed is not None
        else stream_seed(config.seed, "corpus"),
        "ubm": stream_seed(config.seed, "ubm"),
        "mbn": stream_seed(config.seed, "mbn"),
        "kmeans": stream_seed(config.seed, "kmeans"),
    }


def load_source(config):
    """Return ``(utterances, truth or None, corpus spec or None)``."""
    if config.manifest is not None:
        utterances, labels = load_dataset(config.manifest)
        truth = None if labels is None else encode_labels(labels)[0]
        return utterances, truth, None
    spec = replace(config.corpus, seed=effective_seeds(config)["corpus"])
    utterances, truth, _ = generate_synthetic_corpus(spec)
    return utterances, truth, spec


def _n_clusters(settings, truth):
    if settings.n_clusters is not None:
        return settings.n_clusters
    if truth is None:
        raise ConfigError("the number of clusters is unknown: set cluster.n_clusters or provide labels")
    return int(len(np.unique(truth)))


def cluster_embedding(Y, settings, truth, seed, workers=None):
    if settings.method == "kmeans":
        cfg = KMeansConfig(
            _n_clusters(settings, truth), settings.restarts, settings.max_iters, settings.tol, seed
        )
        return kmeans(Y, cfg, workers=workers)
    return agglomerative(Y, n_clusters=settings.n_clusters, distance_threshold=settings.distance_threshold)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, DatasetError, PipelineError):
        raise
    except Exception as exc:
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# one run
# ---------------------------------------------------------------------------

def run_pipeline(config):
    """Run every selected method once and write all intermediates.

    Layout of ``config.output_dir``::

        config.json  report.json  ubm.json  supervectors.bin  utterances.txt
        corpus/                     (synthetic source only)
        mbn/model/  mbn/embedding.bin  mbn/assignments.csv  mbn/report.json
        pca/mean.bin  pca/projection.bin  pca/embedding.bin  ...
        raw-kmeans/assignments.csv  raw-kmeans/report.json

    Returns the report dictionary that is also written to ``report.json``.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = effective_seeds(config)
    workers = config.workers

    utterances, truth, spec = _stage("data", load_source, config)
    if spec is not None:
        _stage("data", write_dataset, out / "corpus", utterances, [f"spk{t:03d}" for t in truth])
    ids = [u.utterance_id for u in utterances]
    (out / "utterances.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")

    ubm_cfg = replace(config.ubm, seed=seeds["ubm"])
    ubm = _stage("ubm", train_ubm, utterances, ubm_cfg, workers=workers)
    ubm.save(out / "ubm.json")
    X = _stage("supervector", extract_supervectors, ubm, utterances,
               normalize=ubm_cfg.normalize_stats, workers=workers)
    save_matrix(out / "supervectors.bin", X)

    mbn_cfg = replace(config.mbn, seed=seeds["mbn"])
    if mbn_cfg.k_schedule is None and mbn_cfg.speaker_hint is None and config.cluster.method == "kmeans":
        try:
            mbn_cfg = replace(mbn_cfg, speaker_hint=_n_clusters(config.cluster, truth))
        except ConfigError:
            pass

    methods = {}
    for method in config.methods:
        mdir = out / method
        mdir.mkdir(exist_ok=True)
        entry = {}
        if method == "mbn":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                model, Y = _stage("mbn", train_mbn, X, mbn_cfg, workers=workers)
            model.save(mdir / "model")
            entry.update(
                schedule=model.schedule,
                reconstruction_fraction=model.reconstruction_fraction,
                output_dim=int(Y.shape[1]),
                warnings=[str(w.message) for w in caught],
            )
        elif method == "pca":
            dim = config.pca_output_dim or config.mbn.output_dim
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                mean, proj, _ = _stage("pca", pca_fit, X, dim)
            save_matrix(mdir / "mean.bin", mean[None, :])
            save_matrix(mdir / "projection.bin", proj)
            Y = pca_transform(X, mean, proj)
            entry.update(output_dim=int(Y.shape[1]), warnings=[str(w.message) for w in caught])
        else:
            Y = X
            entry.update(output_dim=int(X.shape[1]))
        if method != "raw-kmeans":
            save_matrix(mdir / "embedding.bin", Y)
        assignment = _stage("cluster", cluster_embedding, Y, config.cluster, truth, seeds["kmeans"], workers)
        write_assignments(mdir / "assignments.csv", ids, assignment.labels)
        report = evaluation_report(assignment, truth)
        write_report(mdir / "report.json", report)
        entry.update(report)
        methods[method] = entry

    full = {
        "config": config.to_json(),
        "effective": {
            "seeds": seeds,
            "ubm": asdict(ubm_cfg),
            "mbn": mbn_cfg.to_json(),
            "num_utterances": len(utterances),
            "feature_dim": utterances[0].feature_dim,
            "supervector_dim": int(X.shape[1]),
            "corpus": None if spec is None else _corpus_json(spec),
        },
        "methods": methods,
    }
    full["config"].pop("output_dir", None)
    write_report(out / "report.json", full)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2)
        fh.write("\n")
    return full


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    mixture_counts: Tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    em_iteration_options: Tuple[int, ...] = (0, 20)
    output_dims: Tuple[int, ...] = (2, 3, 5, 10, 30, 50)
    seeds: Tuple[int, ...] = (0,)
    # hidden-layer depths to evaluate in addition to the full network
    layer_truncations: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        for name in ("mixture_counts", "em_iteration_options", "output_dims", "seeds"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"sweep list {name} is empty")
            object.__setattr__(self, name, value)
        if self.layer_truncations is not None:
            object.__setattr__(self, "layer_truncations", tuple(self.layer_truncations))

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


def _row(method, mixtures, em_iters, output_dim, depth, seed, nmi_value, seconds):
    return {
        "method": method, "mixtures": mixtures, "em_iters": em_iters,
        "output_dim": output_dim, "depth": depth, "seed": seed,
        "nmi": nmi_value, "wall_seconds": seconds,
    }


def _score(Y, base, truth, seed):
    assignment = cluster_embedding(Y, base.cluster, truth, seed, workers=1)
    return evaluation_report(assignment, truth)["nmi"]


def run_cell(base, utterances, truth, mixtures, em_iters, seed, sweep, cell_dir=None):
    """All methods for one ``(mixtures, em_iters, seed)`` cell; returns result rows."""
    cell_cfg = replace(base, seed=seed)
    seeds = effective_seeds(cell_cfg)
    km_seed = seeds["kmeans"]
    t0 = time.perf_counter()
    ubm_cfg = replace(base.ubm, num_mixtures=mixtures, em_iterations=em_iters, seed=seeds["ubm"])
    ubm = train_ubm(utterances, ubm_cfg, workers=1)
    X = extract_supervectors(ubm, utterances, normalize=ubm_cfg.normalize_stats, workers=1)
    ubm_seconds = time.perf_counter() - t0
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        ubm.save(cell_dir / "ubm.json")
        save_matrix(cell_dir / "supervectors.bin", X)

    rows = []
    if "raw-kmeans" in base.methods:
        t = time.perf_counter()
        rows.append(_row("raw-kmeans", mixtures, em_iters, X.shape[1], "", seed,
                         _score(X, base, truth, km_seed), ubm_seconds + time.perf_counter() - t))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mbn_mod.MbnWarning)
        if "pca" in base.methods:
            for dim in sweep.output_dims:
                t = time.perf_counter()
                mean, proj, _ = pca_fit(X, dim)
                Y = pca_transform(X, mean, proj)
                rows.append(_row("pca", mixtures, em_iters, dim, "", seed,
                                 _score(Y, base, truth, km_seed),
                                 ubm_seconds + time.perf_counter() - t))
        if "mbn" in base.methods:
            t = time.perf_counter()
            mbn_cfg = replace(base.mbn, seed=seeds["mbn"])
            if mbn_cfg.k_schedule is None and mbn_cfg.speaker_hint is None and truth is not None:
                mbn_cfg = replace(mbn_cfg, speaker_hint=_n_clusters(base.cluster, truth))
            layers, codes, *_ = train_hidden_layers(X, mbn_cfg, workers=1)
            train_seconds = ubm_seconds + time.perf_counter() - t
            full = len(layers)
            depths = sorted({d for d in (sweep.layer_truncations or ()) if 1 <= d <= full} | {full})
            for depth in depths:
                for dim in sweep.output_dims:
                    t = time.perf_counter()
                    Y = mbn_mod.embed_codes(codes[depth - 1], layers[depth - 1].k, dim)
                    rows.append(_row("mbn", mixtures, em_iters, dim, depth, seed,
                                     _score(Y, base, truth, km_seed),
                                     train_seconds + time.perf_counter() - t))
    return rows


def _cell_job(args):
    base, utterances, truth, mixtures, em_iters, seed, sweep, cell_dir = args
    try:
        return run_cell(base, utterances, truth, mixtures, em_iters, seed, sweep, cell_dir), None
    except Exception as exc:  # recorded, sweep continues
        return [], {
            "mixtures": mixtures, "em_iters": em_iters, "seed": seed,
            "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
        }


def run_sweep(sweep, base, output_dir=None, workers=None):
    """Run the full ``mixtures x em_iters x seeds`` grid.

    Every cell trains its UBM once and feeds the same supervectors to each
    method. Cells run in a process pool (``MBN_WORKERS`` or ``workers``);
    the results table is assembled in grid order afterwards, so the rows do
    not depend on scheduling.

    Returns ``(rows, errors)``. With ``output_dir`` the table is written to
    ``results.csv`` together with the aggregated views (see
    :func:`write_sweep_outputs`).
    """
    utterances, truth, _ = load_source(base)
    if truth is None:
        raise ConfigError("sweeps need ground-truth labels")
    out = None if output_dir is None else Path(output_dir)
    jobs = []
    for mixtures in sweep.mixture_counts:
        for em_iters in sweep.em_iteration_options:
            for seed in sweep.seeds:
                cell_dir = None if out is None else out / "cells" / f"C{mixtures}_em{em_iters}_seed{seed}"
                jobs.append((base, utterances, truth, mixtures, em_iters, seed, sweep, cell_dir))
    n_workers = min(worker_count(workers), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    rows = [row for cell_rows, _ in results for row in cell_rows]
    errors = [err for _, err in results if err is not None]
    for err in errors:
        logger.error("sweep cell C=%s em=%s seed=%s failed: %s",
                     err["mixtures"], err["em_iters"], err["seed"], err["error"])
    if out is not None:
        write_sweep_outputs(out, rows, errors)
    return rows, errors


def _full_depth_rows(rows):
    """MBN rows at the full network depth of their cell, plus every non-MBN row."""
    full = {}
    for r in rows:
        if r["method"] == "mbn":
            key = (r["mixtures"], r["em_iters"], r["seed"])
            full[key] = max(full.get(key, 0), r["depth"])
    return [
        r for r in rows
        if r["method"] != "mbn" or r["depth"] == full[(r["mixtures"], r["em_iters"], r["seed"])]
    ]


def _group_max(rows, key_fields):
    best = {}
    for r in rows:
        if r["nmi"] is None or (isinstance(r["nmi"], float) and math.isnan(r["nmi"])):
            continue
        key = tuple(r[k] for k in key_fields)
        best[key] = max(best.get(key, -math.inf), r["nmi"])
    return best


def _median_over_seeds(best, key_fields):
    """``best`` is keyed by ``key_fields + ("seed",)``."""
    groups = {}
    for key, value in best.items():
        groups.setdefault(key[:-1], []).append(value)
    return [dict(zip(key_fields, k), nmi=statistics.median(v), seeds=len(v))
            for k, v in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0]))]


def best_over_dims(rows):
    """Per method, UBM and seed, the best NMI over candidate output dimensions."""
    fields_ = ("method", "mixtures", "em_iters", "seed")
    return _group_max(_full_depth_rows(rows), fields_)


def best_over_ubms(rows):
    """Per method, EM setting, output dimension and seed, the best NMI over mixture counts."""
    fields_ = ("method", "em_iters", "output_dim", "seed")
    return _group_max([r for r in _full_depth_rows(rows) if r["method"] != "raw-kmeans"], fields_)


def summarize_best_over_dims(rows):
    return _median_over_seeds(best_over_dims(rows), ("method", "mixtures", "em_iters"))


def summarize_best_over_ubms(rows):
    return _median_over_seeds(best_over_ubms(rows), ("method", "em_iters", "output_dim"))


def summarize_depth(rows):
    """Median NMI over seeds for every MBN (mixtures, em_iters, output_dim, depth)."""
    groups = {}
    for r in rows:
        if r["method"] == "mbn" and r["nmi"] is not None:
            groups.setdefault((r["mixtures"], r["em_iters"], r["output_dim"], r["depth"]), []).append(r["nmi"])
    return [
        {"mixtures": k[0], "em_iters": k[1], "output_dim": k[2], "depth": k[3],
         "nmi": statistics.median(v), "seeds": len(v)}
        for k, v in sorted(groups.items())
    ]


def write_rows(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def read_results(path):
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "method": r["method"],
                "mixtures": int(r["mixtures"]),
                "em_iters": int(r["em_iters"]),
                "output_dim": int(r["output_dim"]),
                "depth": int(r["depth"]) if r["depth"] else "",
                "seed": int(r["seed"]),
                "nmi": float(r["nmi"]) if r["nmi"] else None,
                "wall_seconds": float(r["wall_seconds"]) if r["wall_seconds"] else None,
            })
    return rows


def write_sweep_outputs(out, rows, errors=()):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "results.csv", rows, RESULT_COLUMNS)
    write_rows(out / "best_over_dims.csv", summarize_best_over_dims(rows),
               ("method", "mixtures", "em_iters", "nmi", "seeds"))
    write_rows(out / "best_over_ubms.csv", summarize_best_over_ubms(rows),
               ("method", "em_iters", "output_dim", "nmi", "seeds"))
    write_rows(out / "depth.csv", summarize_depth(rows),
               ("mixtures", "em_iters", "output_dim", "depth", "nmi", "seeds"))
    with open(out / "errors.json", "w", encoding="utf-8") as fh:
        json.dump(list(errors), fh, indent=2)
        fh.write("\n")
