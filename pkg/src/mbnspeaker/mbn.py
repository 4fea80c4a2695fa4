"""Multilayer bootstrap network (MBN).

Each hidden layer is an ensemble of independent k-centers clusterings. A
clustering looks at a random subset of the input dimensions, takes ``k``
random input rows as fixed centers, optionally scrambles part of those
centers by a one-step cyclic shift, and encodes every input as the one-hot
index of its best-matching center. The one-hot codes of all clusterings are
concatenated to form the next layer's input, and PCA on the top layer gives
the low-dimensional embedding.

Layer inputs above the first are binary with exactly ``V`` active units per
row, so they are carried as integer code arrays of shape ``(n, V)`` and as
``scipy.sparse`` CSR matrices of width ``V * k`` when a matrix is needed.
"""

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from mbnspeaker._util import make_rng, worker_count
from mbnspeaker.dataio import load_matrix, save_matrix

BOTTOM = "bottom"
UPPER = "upper"
_EPS = 1e-9


class MbnError(ValueError):
    pass


class MbnWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MbnConfig:
    """Hyperparameters of an MBN.

    ``reconstruction_fraction=None`` selects 0.5 when the first layer is
    large relative to the data (``k_1 > 0.8 n``) and 0 otherwise.
    ``k_schedule=None`` derives the schedule from ``k_max`` and
    ``speaker_hint`` with :func:`compute_k_schedule`.
    """

    num_clusterings: int = 400
    feature_fraction: float = 0.5
    reconstruction_fraction: Optional[float] = None
    k_schedule: Optional[Tuple[int, ...]] = None
    k_max: int = 10000
    speaker_hint: Optional[int] = None
    decay: float = 0.5
    output_dim: int = 2
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        if self.num_clusterings < 1:
            raise MbnError("num_clusterings must be positive")
        if not 0 < self.feature_fraction <= 1:
            raise MbnError(f"feature_fraction must lie in (0, 1], got {self.feature_fraction}")
        r = self.reconstruction_fraction
        if r is not None and not 0 <= r <= 0.5:
            raise MbnError(f"reconstruction_fraction must lie in [0, 0.5], got {r}")
        if not 0 < self.decay < 1:
            raise MbnError("decay must lie in (0, 1)")
        if self.output_dim < 1 or self.k_max < 1:
            raise MbnError("output_dim and k_max must be positive")
        if self.speaker_hint is not None and self.speaker_hint < 1:
            raise MbnError("speaker_hint must be positive")
        if self.k_schedule is not None:
            sched = tuple(int(k) for k in self.k_schedule)
            object.__setattr__(self, "k_schedule", sched)
            validate_schedule(sched)

    def to_json(self):
        obj = asdict(self)
        if self.k_schedule is not None:
            obj["k_schedule"] = list(self.k_schedule)
        return obj

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        if obj.get("k_schedule") is not None:
            obj["k_schedule"] = tuple(obj["k_schedule"])
        return cls(**obj)


def validate_schedule(schedule):
    if not schedule:
        raise MbnError("empty k schedule")
    if len(schedule) > 1:
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise MbnError(f"k schedule must be strictly decreasing, got {list(schedule)}")
        if min(schedule) < 2:
            raise MbnError(f"every k must be at least 2 in a multilayer schedule, got {list(schedule)}")
    elif schedule[0] < 1:
        raise MbnError("k must be positive")


def compute_k_schedule(n, k_max, c_hint=None, decay=0.5):
    """Cluster counts per layer from the dataset size.

    The first layer uses ``min(floor(0.9 n), k_max)`` centers and each later
    layer keeps ``floor(decay * k)`` of the previous one, stopping before k
    falls under ``ceil(1.5 c_hint)`` (or 30 when the speaker count is
    unknown).

    >>> compute_k_schedule(3400, 10000, 34)
    [3060, 1530, 765, 382, 191, 95]
    """
    if n < 4:
        raise MbnError(f"need at least 4 points for a schedule, got {n}")
    k_stop = math.ceil(1.5 * c_hint) if c_hint is not None else 30
    k = min(int(math.floor(0.9 * n + _EPS)), int(k_max))
    schedule = [k]
    while True:
        k = int(math.floor(decay * k + _EPS))
        if k < k_stop or k < 2 or k >= schedule[-1]:
            break
        schedule.append(k)
    return schedule


def auto_reconstruction_fraction(k1, n):
    return 0.5 if k1 > 0.8 * n else 0.0


def selected_width(a, d):
    return max(1, int(math.ceil(a * d - _EPS)))


def shifted_width(r, d_hat):
    return int(math.floor(r * d_hat + _EPS))


# ---------------------------------------------------------------------------
# one clustering
# ---------------------------------------------------------------------------

@dataclass
class KCentersClustering:
    """``k`` fixed centers living on ``selected_dims`` of the layer input.

    ``centers`` is a dense ``(k, d_hat)`` array at the bottom layer and a
    binary CSR matrix above it. ``sample_rows`` and ``shifted_cols`` record
    which input rows seeded the centers and which center columns were
    cyclically shifted; they are kept for inspection only.
    """

    selected_dims: np.ndarray
    centers: object
    sample_rows: Optional[np.ndarray] = None
    shifted_cols: Optional[np.ndarray] = None

    @property
    def k(self):
        return self.centers.shape[0]

    def dense_centers(self):
        return self.centers.toarray() if sp.issparse(self.centers) else self.centers


def _rotate_sparse(centers, cols):
    """Row ``i`` of every column in ``cols`` takes the value of row ``i + 1 (mod k)``."""
    k, width = centers.shape
    coo = centers.tocoo()
    moving = np.zeros(width, dtype=bool)
    moving[cols] = True
    rows = coo.row.copy()
    sel = moving[coo.col]
    rows[sel] = (rows[sel] - 1) % k
    out = sp.csr_matrix((coo.data, (rows, coo.col)), shape=(k, width), dtype=centers.dtype)
    out.sort_indices()
    return out


def train_clustering(X, k, a, r, rng):
    """Train one k-centers clustering.

    Parameters
    ----------
    X : ndarray or CSR matrix, shape (n, d)
        Layer input.
    k : int
        Number of centers; must not exceed ``n``.
    a : float
        Fraction of input dimensions to keep, ``d_hat = max(1, ceil(a d))``.
    r : float
        Fraction of kept dimensions to shift, ``d' = floor(r d_hat)``.
    rng : numpy.random.Generator
    """
    n, d = X.shape
    if k > n:
        raise MbnError(f"k={k} centers requested from only {n} points")
    if d < 1:
        raise MbnError("layer input has no dimensions")
    d_hat = selected_width(a, d)
    dims = np.sort(rng.choice(d, size=d_hat, replace=False))
    rows = rng.choice(n, size=k, replace=False)
    d_shift = shifted_width(r, d_hat)
    cols = np.sort(rng.choice(d_hat, size=d_shift, replace=False)) if d_shift else np.empty(0, np.int64)
    if sp.issparse(X):
        centers = X[rows][:, dims].tocsr()
        centers.sort_indices()
        if d_shift:
            centers = _rotate_sparse(centers, cols)
    else:
        centers = X[np.ix_(rows, dims)]
        if d_shift:
            centers[:, cols] = np.roll(centers[:, cols], -1, axis=0)
    return KCentersClustering(dims, centers, rows.astype(np.int64), cols.astype(np.int32))


def _global_centers(clustering, width):
    c = clustering.centers
    return sp.csr_matrix(
        (c.data, clustering.selected_dims[c.indices], c.indptr), shape=(c.shape[0], width)
    )


def encode_clustering(clustering, X, mode):
    """Winning center index for every row of ``X``; ties go to the lowest index."""
    if mode == BOTTOM:
        if sp.issparse(X):
            X = X.toarray()
        W = clustering.dense_centers()
        Xs = X[:, clustering.selected_dims]
        # ||x||^2 is constant per row and does not change the argmin
        dist = np.sum(W * W, axis=1)[None, :] - 2.0 * (Xs @ W.T)
        return np.argmin(dist, axis=1)
    if mode == UPPER:
        if not sp.issparse(X):
            X = sp.csr_matrix(np.asarray(X))
        W = _global_centers(clustering, X.shape[1])
        scores = (X @ W.T).toarray()
        return np.argmax(scores, axis=1)
    raise MbnError(f"unknown similarity mode {mode!r}")


def encode_one(clustering, x, mode):
    """Encode a single dense input vector; returns an index in ``[0, k)``."""
    x = np.asarray(x, dtype=np.float64)[None, :]
    if mode == UPPER:
        x = sp.csr_matrix(x)
    return int(encode_clustering(clustering, x, mode)[0])


# ---------------------------------------------------------------------------
# layers and sparse codes
# ---------------------------------------------------------------------------

@dataclass
class MbnLayer:
    layer_index: int
    k: int
    clusterings: List[KCentersClustering]

    @property
    def mode(self):
        return BOTTOM if self.layer_index == 1 else UPPER

    @property
    def width(self):
        return len(self.clusterings) * self.k


def codes_to_csr(codes, k):
    """One-hot CSR matrix of width ``V * k`` from an ``(n, V)`` code array.

    Clustering ``v`` owns columns ``v*k .. v*k + k - 1``.
    """
    n, V = codes.shape
    cols = (np.arange(V, dtype=np.int64) * k)[None, :] + codes
    return sp.csr_matrix(
        (np.ones(n * V, dtype=np.int32), cols.ravel().astype(np.int32), np.arange(0, n * V + 1, V)),
        shape=(n, V * k),
    )


def codes_to_dense(codes, k):
    return codes_to_csr(codes, k).toarray().astype(np.float64)


def _map(fn, items, workers):
    n_workers = min(worker_count(workers), max(1, len(items)))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def train_layer(X, layer_index, k, V, a, r, seed, workers=None):
    """Train ``V`` clusterings on ``X`` and return the layer with its codes.

    Clustering ``v`` of layer ``l`` draws from its own RNG seeded by
    ``(seed, l, v)``, so the result does not depend on execution order.
    """
    mode = BOTTOM if layer_index == 1 else UPPER

    def job(v):
        cl = train_clustering(X, k, a, r, make_rng(seed, layer_index, v))
        return cl, encode_clustering(cl, X, mode)

    results = _map(job, range(V), workers)
    layer = MbnLayer(layer_index, k, [cl for cl, _ in results])
    codes = np.stack([c for _, c in results], axis=1)
    return layer, codes


def encode_layer(layer, X, workers=None):
    """Codes of shape ``(n, V)``; column ``v`` holds the active index of clustering ``v``."""
    cols = _map(lambda cl: encode_clustering(cl, X, layer.mode), layer.clusterings, workers)
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def _fix_signs(vectors):
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def pca_fit(Z, out_dim):
    """Fit PCA; returns ``(mean, projection, variances)``.

    ``projection`` has shape ``(D, out_dim')`` with orthonormal columns in
    descending eigenvalue order, each signed so that its largest-magnitude
    entry is positive. ``out_dim'`` is ``out_dim`` clamped to the numerical
    rank of the centered data (a :class:`MbnWarning` is issued). When the
    data are wider than they are tall the eigenproblem is solved on the
    ``n x n`` Gram matrix instead of the ``D x D`` covariance.
    """
    n, D = Z.shape
    if n < 2:
        raise MbnError("PCA needs at least 2 points")
    sparse = sp.issparse(Z)
    if sparse:
        mean = np.asarray(Z.mean(axis=0), dtype=np.float64).ravel()
    else:
        Z = np.asarray(Z, dtype=np.float64)
        mean = Z.mean(axis=0)

    if D <= n:
        Zc = (Z.toarray() if sparse else Z) - mean
        evals, evecs = np.linalg.eigh(Zc.T @ Zc / (n - 1))
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        if sparse:
            G = (Z @ Z.T).toarray().astype(np.float64)
        else:
            G = Z @ Z.T
        rmean = G.mean(axis=1)
        Gc = G - rmean[:, None] - rmean[None, :] + rmean.mean()
        gvals, gvecs = np.linalg.eigh(Gc)
        gvals, gvecs = gvals[::-1], gvecs[:, ::-1]
        evals = gvals / (n - 1)
        evecs = None  # built below for the retained components only

    scale = max(evals[0], 0.0)
    tol = scale * max(n, D) * np.finfo(np.float64).eps * 10
    rank = int(np.sum(evals > tol)) if scale > 0 else 0
    limit = min(n - 1, D)
    if out_dim > limit:
        warnings.warn(f"PCA output clamped from {out_dim} to {limit} dims (n={n}, D={D})", MbnWarning)
        out_dim = limit

    if rank == 0:
        warnings.warn("PCA input has zero variance; embedding is all zeros", MbnWarning)
        projection = np.eye(D, out_dim)
        return mean, projection, np.zeros(out_dim)
    if out_dim > rank:
        warnings.warn(f"PCA output clamped from {out_dim} to numerical rank {rank}", MbnWarning)
        out_dim = rank

    if evecs is None:
        U = gvecs[:, :out_dim]
        ZtU = np.asarray(Z.T @ U) - np.outer(mean, U.sum(axis=0))
        projection = ZtU / np.sqrt(gvals[:out_dim])[None, :]
    else:
        projection = evecs[:, :out_dim]
    projection = _fix_signs(np.ascontiguousarray(projection))
    return mean, projection, evals[:out_dim].copy()


def pca_transform(Z, mean, projection):
    if sp.issparse(Z):
        return np.asarray(Z @ projection) - mean @ projection
    return (np.asarray(Z, dtype=np.float64) - mean) @ projection


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------

@dataclass
class MbnModel:
    config: MbnConfig
    layers: List[MbnLayer]
    pca_mean: np.ndarray
    pca_projection: np.ndarray
    input_dim: int
    reconstruction_fraction: float
    input_shift: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None

    @property
    def schedule(self):
        return [layer.k for layer in self.layers]

    @property
    def output_dim(self):
        return self.pca_projection.shape[1]

    def save(self, directory):
        save_model(self, directory)


def resolve_schedule(n, config):
    if config.k_schedule is not None:
        return list(config.k_schedule)
    return compute_k_schedule(n, config.k_max, config.speaker_hint, config.decay)


def _prepare_input(X, shift, scale):
    X = np.asarray(X, dtype=np.float64)
    if shift is not None:
        X = (X - shift) / scale
    return X


def train_hidden_layers(X, config, workers=None):
    """Train the hidden layers only.

    Returns ``(layers, codes, r, shift, scale)`` where ``codes[l]`` is the
    ``(n, V)`` code array produced by layer ``l + 1`` on the training data.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise MbnError(f"expected a 2-D input, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise MbnError("input contains non-finite values")
    n = X.shape[0]
    schedule = resolve_schedule(n, config)
    if schedule[0] > n:
        raise MbnError(f"schedule infeasible: k_1={schedule[0]} exceeds n={n}")
    r = config.reconstruction_fraction
    if r is None:
        r = auto_reconstruction_fraction(schedule[0], n)

    shift = scale = None
    if config.standardize:
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    current = _prepare_input(X, shift, scale)

    layers, codes = [], []
    for idx, k in enumerate(schedule, start=1):
        layer, layer_codes = train_layer(
            current, idx, k, config.num_clusterings, config.feature_fraction, r,
            config.seed, workers,
        )
        layers.append(layer)
        codes.append(layer_codes)
        current = codes_to_csr(layer_codes, k)
    return layers, codes, r, shift, scale


def train_mbn(X, config, workers=None):
    """Train an MBN on ``X`` (rows are supervectors) and embed it.

    Returns
    -------
    model : MbnModel
    Y : ndarray, shape (n, output_dim)
        Identical to ``transform(model, X)``.
    """
    layers, codes, r, shift, scale = train_hidden_layers(X, config, workers)
    top = codes_to_csr(codes[-1], layers[-1].k)
    mean, projection, _ = pca_fit(top, config.output_dim)
    model = MbnModel(config, layers, mean, projection, X.shape[1], r, shift, scale)
    return model, pca_transform(top, mean, projection)


def encode_all(model, X, depth=None, workers=None):
    """Code arrays of every layer (or the first ``depth`` layers) for ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise MbnError(
            f"input has {X.shape[-1]} dimensions, model was trained on {model.input_dim}"
        )
    current = _prepare_input(X, model.input_shift, model.input_scale)
    out = []
    for layer in model.layers[:depth]:
        codes = encode_layer(layer, current, workers)
        out.append(codes)
        current = codes_to_csr(codes, layer.k)
    return out


def transform(model, X_new, workers=None):
    """Embed new points with the stored centers and PCA."""
    codes = encode_all(model, X_new, workers=workers)
    top = codes_to_csr(codes[-1], model.layers[-1].k)
    return pca_transform(top, model.pca_mean, model.pca_projection)


def embed_codes(codes, k, out_dim):
    """PCA embedding of one layer's training codes (used for depth studies)."""
    Z = codes_to_csr(codes, k)
    mean, projection, _ = pca_fit(Z, out_dim)
    return pca_transform(Z, mean, projection)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model, directory):
    """Write ``model`` as a directory of JSON and ``MBNMAT1`` files.

    Layout::

        config.json
        layer_01/selected_dims.bin     V x d_hat (integer-valued)
        layer_01/centers.bin           (V*k) x d_hat, clustering-major
        layer_02/centers_indptr.bin    1 x (V*k + 1)  CSR row pointers
        layer_02/centers_indices.bin   1 x nnz        CSR column indices
        pca_mean.bin, pca_projection.bin

    Upper-layer centers are binary, so only the positions of their ones are
    stored.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": model.config.to_json(),
        "input_dim": int(model.input_dim),
        "reconstruction_fraction": float(model.reconstruction_fraction),
        "schedule": model.schedule,
        "standardized": model.input_shift is not None,
    }
    with open(directory / "config.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    for layer in model.layers:
        ldir = directory / f"layer_{layer.layer_index:02d}"
        ldir.mkdir(exist_ok=True)
        save_matrix(ldir / "selected_dims.bin", np.stack([c.selected_dims for c in layer.clusterings]))
        if layer.mode == BOTTOM:
            save_matrix(ldir / "centers.bin", np.vstack([c.centers for c in layer.clusterings]))
        else:
            stacked = sp.vstack([c.centers for c in layer.clusterings], format="csr")
            if stacked.nnz and not np.all(stacked.data == 1):
                raise MbnError("upper-layer centers are expected to be binary")
            save_matrix(ldir / "centers_indptr.bin", stacked.indptr.astype(np.float64)[None, :])
            save_matrix(ldir / "centers_indices.bin",
                        stacked.indices.astype(np.float64).reshape(1, -1) if stacked.nnz else np.zeros((1, 1)))
    save_matrix(directory / "pca_mean.bin", model.pca_mean[None, :])
    save_matrix(directory / "pca_projection.bin", model.pca_projection)
    if model.input_shift is not None:
        save_matrix(directory / "input_shift.bin", model.input_shift[None, :])
        save_matrix(directory / "input_scale.bin", model.input_scale[None, :])


def load_model(directory):
    directory = Path(directory)
    with open(directory / "config.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = MbnConfig.from_json(meta["config"])
    layers = []
    for idx, k in enumerate(meta["schedule"], start=1):
        ldir = directory / f"layer_{idx:02d}"
        dims = load_matrix(ldir / "selected_dims.bin").astype(np.int64)
        V, d_hat = dims.shape
        clusterings = []
        if idx == 1:
            centers = load_matrix(ldir / "centers.bin")
            for v in range(V):
                clusterings.append(KCentersClustering(dims[v], centers[v * k:(v + 1) * k].copy()))
        else:
            indptr = load_matrix(ldir / "centers_indptr.bin").ravel().astype(np.int64)
            indices = load_matrix(ldir / "centers_indices.bin").ravel().astype(np.int32)
            nnz = int(indptr[-1])
            stacked = sp.csr_matrix(
                (np.ones(nnz, dtype=np.int32), indices[:nnz], indptr), shape=(V * k, d_hat)
            )
            for v in range(V):
                clusterings.append(KCentersClustering(dims[v], stacked[v * k:(v + 1) * k].tocsr()))
        layers.append(MbnLayer(idx, k, clusterings))
    shift = scale = None
    if meta.get("standardized"):
        shift = load_matrix(directory / "input_shift.bin").ravel()
        scale = load_matrix(directory / "input_scale.bin").ravel()
    return MbnModel(
        config, layers,
        load_matrix(directory / "pca_mean.bin").ravel(),
        load_matrix(directory / "pca_projection.bin"),
        int(meta["input_dim"]), float(meta["reconstruction_fraction"]), shift, scale,
    )
