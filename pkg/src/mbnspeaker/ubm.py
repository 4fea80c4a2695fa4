"""Universal background model training and supervector extraction.

The UBM is a diagonal-covariance GMM fitted by EM on the frames of every
utterance pooled together. Each utterance is then summarised by its
zeroth-order statistics ``n`` (soft frame counts per mixture) and centered
first-order statistics ``f`` (soft sums of ``o_t - m_c``), concatenated as
``x = [n; f]``.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from mbnspeaker._util import worker_count
from mbnspeaker.dataio import FrameMatrix, pool_frames

# E-step work is split into fixed-size chunks and reduced in chunk order, so the
# result never depends on how many threads did the work.
CHUNK_FRAMES = 8192
DEAD_MIXTURE_MASS = 1e-10
_MIN_FLOOR = 1e-12
_LOG_2PI = np.log(2.0 * np.pi)


class UbmError(ValueError):
    pass


@dataclass(frozen=True)
class UbmConfig:
    num_mixtures: int = 16
    em_iterations: int = 20
    variance_floor_factor: float = 1e-3
    seed: int = 0
    # divide f_c by n_c when extracting supervectors; off by default
    normalize_stats: bool = False

    def __post_init__(self):
        if self.num_mixtures < 1:
            raise UbmError(f"num_mixtures must be positive, got {self.num_mixtures}")
        if self.em_iterations < 0:
            raise UbmError(f"em_iterations must be nonnegative, got {self.em_iterations}")
        if not self.variance_floor_factor > 0:
            raise UbmError("variance_floor_factor must be positive")
        if self.seed < 0:
            raise UbmError("seed must be unsigned")


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: np.ndarray
    seed: int = 0
    em_iterations: int = 0

    @property
    def num_mixtures(self):
        return self.means.shape[0]

    @property
    def feature_dim(self):
        return self.means.shape[1]

    @property
    def supervector_dim(self):
        return self.num_mixtures * (1 + self.feature_dim)

    def copy(self):
        return GmmModel(
            self.weights.copy(), self.means.copy(), self.variances.copy(),
            self.variance_floor.copy(), self.seed, self.em_iterations,
        )

    def to_json(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "seed": int(self.seed),
            "em_iterations": int(self.em_iterations),
            "variance_floor": self.variance_floor.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        variances = np.asarray(obj["variances"], dtype=np.float64)
        floor = obj.get("variance_floor")
        floor = variances.min(axis=0) if floor is None else np.asarray(floor, dtype=np.float64)
        return cls(
            np.asarray(obj["weights"], dtype=np.float64),
            np.asarray(obj["means"], dtype=np.float64),
            variances,
            floor,
            int(obj.get("seed", 0)),
            int(obj.get("em_iterations", 0)),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _as_pooled(frames):
    if isinstance(frames, FrameMatrix):
        return frames.frames
    if isinstance(frames, (list, tuple)):
        return pool_frames(frames)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[:, None]
    return frames


def log_gaussians(model, frames):
    """Per-frame log of ``w_c N(o_t; m_c, diag(v_c))``, shape ``(T, C)``."""
    inv_var = 1.0 / model.variances
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    const = (
        log_w
        - 0.5 * (model.feature_dim * _LOG_2PI + np.log(model.variances).sum(axis=1))
        - 0.5 * np.sum(model.means ** 2 * inv_var, axis=1)
    )
    quad = (frames ** 2) @ inv_var.T - 2.0 * frames @ (model.means * inv_var).T
    return const[None, :] - 0.5 * quad


def posteriors(model, frames):
    """Responsibilities ``gamma[t, c]`` and per-frame log-likelihoods."""
    logp = log_gaussians(model, frames)
    frame_ll = logsumexp(logp, axis=1)
    return np.exp(logp - frame_ll[:, None]), frame_ll


def _init_from_rng(frames, num_mixtures, rng, factor):
    total = frames.shape[0]
    if total < num_mixtures:
        raise UbmError(
            f"cannot initialise {num_mixtures} mixtures from only {total} frames"
        )
    global_var = frames.var(axis=0)
    floor = np.maximum(factor * global_var, _MIN_FLOOR)
    idx = rng.choice(total, size=num_mixtures, replace=False)
    means = frames[idx].copy()
    variances = np.tile(np.maximum(global_var, floor), (num_mixtures, 1))
    weights = np.full(num_mixtures, 1.0 / num_mixtures)
    return GmmModel(weights, means, variances, floor)


def init_ubm(all_frames, config):
    """Random-mean initialisation: ``C`` frames drawn without replacement.

    Weights start uniform and every mixture gets the global per-dimension
    variance of the pooled frames (floored).
    """
    frames = _as_pooled(all_frames)
    model = _init_from_rng(
        frames, config.num_mixtures, np.random.default_rng(config.seed),
        config.variance_floor_factor,
    )
    model.seed = int(config.seed)
    return model


def _accumulate(model, chunk):
    gamma, frame_ll = posteriors(model, chunk)
    return frame_ll.sum(), gamma.sum(axis=0), gamma.T @ chunk, gamma.T @ (chunk ** 2)


def _chunks(frames):
    return [frames[s:s + CHUNK_FRAMES] for s in range(0, frames.shape[0], CHUNK_FRAMES)]


def em_step(model, all_frames, rng=None, workers=None):
    """One EM iteration.

    Returns the updated model and the total log-likelihood of the frames
    under the model *before* the update. A mixture that collects less than
    ``1e-10`` responsibility mass is re-seeded at a random frame with the
    global variance.
    """
    frames = _as_pooled(all_frames)
    chunks = _chunks(frames)
    n_workers = min(worker_count(workers), len(chunks))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(lambda ch: _accumulate(model, ch), chunks))
    else:
        parts = [_accumulate(model, ch) for ch in chunks]

    ll, occ, first, second = parts[0]
    occ, first, second = occ.copy(), first.copy(), second.copy()
    for p_ll, p_occ, p_first, p_second in parts[1:]:
        ll += p_ll
        occ += p_occ
        first += p_first
        second += p_second

    new = model.copy()
    dead = occ < DEAD_MIXTURE_MASS
    live = ~dead
    safe = np.where(live, occ, 1.0)
    new.means[live] = first[live] / safe[live, None]
    var = second[live] / safe[live, None] - new.means[live] ** 2
    new.variances[live] = np.maximum(var, model.variance_floor)
    new.weights = occ / occ.sum()
    if dead.any():
        rng = np.random.default_rng(model.seed) if rng is None else rng
        global_var = np.maximum(frames.var(axis=0), model.variance_floor)
        for c in np.flatnonzero(dead):
            new.means[c] = frames[rng.integers(frames.shape[0])]
            new.variances[c] = global_var
            new.weights[c] = 1.0 / model.num_mixtures
        new.weights /= new.weights.sum()
    new.em_iterations = model.em_iterations + 1
    return new, float(ll)


def train_ubm(dataset, config, workers=None, return_history=False):
    """Initialise from random frames, then run exactly ``em_iterations`` EM steps.

    ``dataset`` may be a list of :class:`FrameMatrix` or an already pooled
    ``(N, F)`` array.
    """
    frames = _as_pooled(dataset)
    if frames.shape[0] == 0:
        raise UbmError("empty dataset")
    rng = np.random.default_rng(config.seed)
    model = _init_from_rng(frames, config.num_mixtures, rng, config.variance_floor_factor)
    model.seed = int(config.seed)
    history = []
    for _ in range(config.em_iterations):
        model, ll = em_step(model, frames, rng=rng, workers=workers)
        history.append(ll)
    if return_history:
        return model, history
    return model


@dataclass(frozen=True)
class Supervector:
    n: np.ndarray
    f: np.ndarray

    @property
    def x(self):
        return np.concatenate([self.n, self.f])


def extract_supervector(model, utterance, normalize=False):
    """Zeroth- and centered first-order Baum-Welch statistics of one utterance.

    Parameters
    ----------
    model : GmmModel
    utterance : FrameMatrix or ndarray of shape (T, F)
    normalize : bool
        Divide each ``f_c`` by ``n_c``. Off by default, leaving the raw
        statistics.
    """
    frames = utterance.frames if isinstance(utterance, FrameMatrix) else np.asarray(utterance, float)
    if frames.ndim != 2 or frames.shape[1] != model.feature_dim:
        raise UbmError(
            f"utterance has feature dimension {frames.shape[-1]}, UBM expects {model.feature_dim}"
        )
    gamma, _ = posteriors(model, frames)
    n = gamma.sum(axis=0)
    f = gamma.T @ frames - n[:, None] * model.means
    if normalize:
        f = f / np.maximum(n, DEAD_MIXTURE_MASS)[:, None]
    return Supervector(n, f.ravel())


def extract_supervectors(model, utterances, normalize=False, workers=None):
    """Stack the supervectors of many utterances into an ``(n, C + C*F)`` matrix."""
    n_workers = min(worker_count(workers), max(1, len(utterances)))

    def one(utt):
        return extract_supervector(model, utt, normalize=normalize).x

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            rows = list(pool.map(one, utterances))
    else:
        rows = [one(u) for u in utterances]
    return np.vstack(rows)
