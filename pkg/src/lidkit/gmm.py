"""Diagonal and full-covariance GMM-UBMs and tandem Gaussian preselection."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_frames, stack_utterances
from .corpusio import ModelContainer

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
_CHUNK = 65536


def _softmax_rows(logp: np.ndarray) -> np.ndarray:
    post = np.exp(logp - logp.max(axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    return post


class DiagGmm(DensityMixin, BaseEstimator):
    """Diagonal-covariance GMM trained by EM.

    Initialisation: every variance is the global variance, means are
    ``n_components`` distinct randomly chosen frames, weights are uniform.

    Parameters
    ----------
    n_components : int
    n_iter : int
        EM iterations run by :meth:`fit`.
    var_floor : float
        Variance floor relative to the global variance.
    random_state : int
    """

    def __init__(self, n_components=64, n_iter=10, var_floor=1e-6, random_state=0):
        self.n_components = n_components
        self.n_iter = n_iter
        self.var_floor = var_floor
        self.random_state = random_state

    @classmethod
    def from_params(cls, weights, means, variances):
        gmm = cls(n_components=len(weights))
        gmm.weights_ = np.asarray(weights, dtype=np.float64)
        gmm.means_ = np.asarray(means, dtype=np.float64)
        gmm.variances_ = np.asarray(variances, dtype=np.float64)
        return gmm

    def _init(self, X: np.ndarray) -> None:
        M = self.n_components
        if X.shape[0] == 0:
            raise ValueError("no training frames")
        if X.shape[0] < M:
            raise ValueError(f"{X.shape[0]} frames is fewer than {M} components")
        _, first = np.unique(X, axis=0, return_index=True)
        if first.size < M:
            raise ValueError(f"only {first.size} distinct frames for {M} components")
        rng = np.random.default_rng(self.random_state)
        pick = np.sort(rng.choice(np.sort(first), size=M, replace=False))
        self.global_var_ = X.var(axis=0)
        self.means_ = X[pick].copy()
        self.variances_ = np.tile(np.maximum(self.global_var_, 1e-12), (M, 1))
        self.weights_ = np.full(M, 1.0 / M)

    def fit(self, X, y=None):
        X = stack_utterances(X)
        self._init(X)
        self.loglike_history_ = []
        self.refine(X, self.n_iter)
        return self

    def refine(self, X, n_iter: int):
        """Run ``n_iter`` more EM iterations, appending to ``loglike_history_``.

        Each history entry is the total log-likelihood of ``X`` under the
        model entering that iteration; a final entry scores the result.
        """
        X = stack_utterances(X)
        if not hasattr(self, "loglike_history_"):
            self.loglike_history_ = []
        if not hasattr(self, "global_var_"):
            self.global_var_ = X.var(axis=0)
        for _ in range(n_iter):
            occ, first, second, total = self._accumulate(X)
            self.loglike_history_.append(total)
            self._update(occ, first, second)
        if n_iter:
            self.loglike_history_.append(float(np.sum(self.score_samples(X))))
        return self

    def _component_loglike(self, X: np.ndarray) -> np.ndarray:
        inv = 1.0 / self.variances_
        const = (np.log(self.weights_)
                 - 0.5 * (X.shape[1] * LOG_2PI + np.sum(np.log(self.variances_), axis=1)
                          + np.sum(self.means_ ** 2 * inv, axis=1)))
        return const[None, :] - 0.5 * (X ** 2) @ inv.T + X @ (self.means_ * inv).T

    def _accumulate(self, X: np.ndarray):
        M, D = self.means_.shape
        occ, first, second, total = np.zeros(M), np.zeros((M, D)), np.zeros((M, D)), 0.0
        for s in range(0, X.shape[0], _CHUNK):
            x = X[s:s + _CHUNK]
            logp = self._component_loglike(x)
            norm = logsumexp(logp, axis=1)
            total += float(norm.sum())
            post = np.exp(logp - norm[:, None])
            occ += post.sum(axis=0)
            first += post.T @ x
            second += post.T @ (x ** 2)
        return occ, first, second, total

    def _update(self, occ, first, second) -> None:
        live = occ > 1e-10
        if not live.all():
            logger.warning("%d components have no occupancy; keeping their parameters",
                           int((~live).sum()))
        means = np.where(live[:, None], first / np.maximum(occ, 1e-300)[:, None], self.means_)
        var = np.where(live[:, None],
                       second / np.maximum(occ, 1e-300)[:, None] - means ** 2, self.variances_)
        self.variances_ = np.maximum(var, self.var_floor * self.global_var_[None, :])
        self.means_ = means
        w = np.maximum(occ, 1e-300)
        self.weights_ = w / w.sum()
        self.occupancy_ = occ

    def score_samples(self, X) -> np.ndarray:
        """Per-frame log-likelihood ``log sum_c w_c N(x; mu_c, Sigma_c)``."""
        check_is_fitted(self, "means_")
        X = as_frames(X, self.means_.shape[1])
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], _CHUNK):
            out[s:s + _CHUNK] = logsumexp(self._component_loglike(X[s:s + _CHUNK]), axis=1)
        return out

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "means_")
        X = as_frames(X, self.means_.shape[1])
        return _softmax_rows(self._component_loglike(X))

    def to_container(self) -> ModelContainer:
        c = ModelContainer({"type": "DiagGmm"})
        c["weights"], c["means"], c["variances"] = self.weights_, self.means_, self.variances_
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "DiagGmm":
        return cls.from_params(c["weights"], c["means"], c["variances"])

    def summary(self) -> str:
        lines = [f"DiagGmm M={len(self.weights_)} D={self.means_.shape[1]}"]
        occ = getattr(self, "occupancy_", None)
        for c, w in enumerate(self.weights_):
            extra = "" if occ is None else f" occupancy={occ[c]:.3f}"
            lines.append(f"{c:5d} weight={w:.6g}{extra}")
        return "\n".join(lines)


class FullGmm(DensityMixin, BaseEstimator):
    """Full-covariance GMM sharing means and weights with a diagonal model."""

    def __init__(self, weights=None, means=None, covariances=None):
        self.weights = weights
        self.means = means
        self.covariances = covariances
        if weights is not None:
            self._set(weights, means, covariances)

    def _set(self, weights, means, covariances):
        self.weights_ = np.asarray(weights, dtype=np.float64)
        self.means_ = np.asarray(means, dtype=np.float64)
        self.covariances_ = np.asarray(covariances, dtype=np.float64)
        chol = np.linalg.cholesky(self.covariances_)
        self._inv_chol = np.linalg.inv(chol)
        self._log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)

    def fit(self, X, y=None):
        raise NotImplementedError("build full models with diag_to_full")

    def component_loglike(self, X: np.ndarray, components=None) -> np.ndarray:
        """Weighted component log-densities ``log w_c + log N(x; mu_c, S_c)``."""
        X = as_frames(X, self.means_.shape[1])
        comps = range(len(self.weights_)) if components is None else components
        D = X.shape[1]
        out = np.empty((X.shape[0], len(comps)))
        for j, c in enumerate(comps):
            z = (X - self.means_[c]) @ self._inv_chol[c].T
            out[:, j] = (np.log(self.weights_[c]) - 0.5 * (D * LOG_2PI + self._log_det[c])
                         - 0.5 * np.sum(z * z, axis=1))
        return out

    def score_samples(self, X) -> np.ndarray:
        return logsumexp(self.component_loglike(X), axis=1)

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))

    def predict_proba(self, X) -> np.ndarray:
        return _softmax_rows(self.component_loglike(X))

    def to_container(self) -> ModelContainer:
        c = ModelContainer({"type": "FullGmm"})
        c["weights"], c["means"], c["covariances"] = (
            self.weights_, self.means_, self.covariances_)
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "FullGmm":
        return cls(c["weights"], c["means"], c["covariances"])


def train_diag_ubm(data, M: int, num_iters: int, seed: int = 0) -> DiagGmm:
    """Fit a diagonal UBM to a frame matrix or a list of per-utterance matrices."""
    return DiagGmm(M, num_iters, random_state=seed).fit(data)


def loglike(model, frame) -> float:
    """Log-likelihood of a single frame under a diagonal or full GMM."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1:
        raise ValueError("loglike expects a single frame vector")
    D = model.means_.shape[1]
    if frame.size != D:
        raise ValueError(f"frame has dimension {frame.size}, model expects {D}")
    return float(model.score_samples(frame[None, :])[0])


def floor_covariance(cov: np.ndarray, rel_floor: float = 1e-4) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    floor = rel_floor * max(float(np.mean(vals)), 1e-300)
    if vals.min() >= floor:
        return cov
    vals = np.maximum(vals, floor)
    cov = (vecs * vals) @ vecs.T
    return 0.5 * (cov + cov.T)


def diag_to_full(diag: DiagGmm, X, rel_floor: float = 1e-4) -> FullGmm:
    """One EM pass with means and weights held fixed, estimating full covariances.

    Posteriors come from the diagonal model; components with (near) zero
    occupancy keep their diagonal covariance.
    """
    check_is_fitted(diag, "means_")
    X = stack_utterances(X)
    M, D = diag.means_.shape
    scatter = np.zeros((M, D, D))
    occ = np.zeros(M)
    for s in range(0, X.shape[0], _CHUNK):
        x = X[s:s + _CHUNK]
        post = diag.predict_proba(x)
        occ += post.sum(axis=0)
        for c in range(M):
            z = (x - diag.means_[c]) * np.sqrt(post[:, c])[:, None]
            scatter[c] += z.T @ z
    covs = np.empty((M, D, D))
    for c in range(M):
        if occ[c] < 1e-8:
            logger.warning("component %d occupancy %.3g; keeping diagonal covariance", c, occ[c])
            covs[c] = np.diag(diag.variances_[c])
        else:
            covs[c] = floor_covariance(scatter[c] / occ[c], rel_floor)
    full = FullGmm(diag.weights_.copy(), diag.means_.copy(), covs)
    full.occupancy_ = occ
    return full


def check_coherent(diag: DiagGmm, full: FullGmm) -> None:
    if (diag.means_.shape != full.means_.shape
            or not np.array_equal(diag.means_, full.means_)
            or not np.array_equal(diag.weights_, full.weights_)):
        raise ValueError("diagonal and full models are not coherent (means/weights differ)")


def select_gaussians(diag: DiagGmm, X, top_n: int) -> np.ndarray:
    """Indices of the ``top_n`` best diagonal components per frame, best first."""
    logp = diag._component_loglike(as_frames(X, diag.means_.shape[1]))
    return np.argsort(-logp, axis=1, kind="stable")[:, :top_n]


def tandem_posteriors(diag: DiagGmm, full: FullGmm, X, top_n: int = 20) -> np.ndarray:
    """Posteriors from full covariances over diagonally preselected Gaussians.

    Accepts one frame or a ``(T, D)`` matrix; rows are dense with exact
    zeros outside the preselected set.
    """
    check_coherent(diag, full)
    M, D = diag.means_.shape
    if not 1 <= top_n <= M:
        raise ValueError(f"top_n must be in [1, {M}]")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = as_frames(X, D)
    T = X.shape[0]
    out = np.zeros((T, M))
    for s in range(0, T, _CHUNK):
        x = X[s:s + _CHUNK]
        sel = select_gaussians(diag, x, top_n)
        logp = np.full((x.shape[0], M), -np.inf)
        for c in range(M):
            rows = np.nonzero((sel == c).any(axis=1))[0]
            if rows.size:
                logp[rows, c] = full.component_loglike(x[rows], [c])[:, 0]
        out[s:s + _CHUNK] = _softmax_rows(logp)
    return out[0] if single else out


class TandemUbm(DensityMixin, BaseEstimator):
    """Diagonal UBM trained in stages, then converted to a coherent full model.

    ``diag_stages`` is a sequence of ``(num_utterances, num_iters)``; each
    stage continues EM on a fresh random subset (``0`` means all
    utterances).  ``full_subset`` utterances feed :func:`diag_to_full`.
    """

    def __init__(self, n_components=64, diag_stages=((0, 10),), full_subset=0, top_n=20,
                 var_floor=1e-6, random_state=0):
        self.n_components = n_components
        self.diag_stages = diag_stages
        self.full_subset = full_subset
        self.top_n = top_n
        self.var_floor = var_floor
        self.random_state = random_state

    @staticmethod
    def _subset(utts: Sequence[np.ndarray], n: int, rng) -> list:
        if n <= 0 or n >= len(utts):
            return list(utts)
        return [utts[i] for i in np.sort(rng.choice(len(utts), size=n, replace=False))]

    def fit(self, X, y=None):
        utts = [X] if isinstance(X, np.ndarray) else list(X)
        rng = np.random.default_rng(self.random_state)
        diag = DiagGmm(self.n_components, 0, self.var_floor, self.random_state)
        for i, (subset, iters) in enumerate(self.diag_stages):
            data = stack_utterances(self._subset(utts, subset, rng))
            if i == 0:
                diag.fit(data)
            diag.refine(data, iters)
            logger.info("diag UBM stage %d: %d frames, %d iterations, avg loglike %.4f",
                        i, data.shape[0], iters, diag.loglike_history_[-1] / data.shape[0])
        self.diag_ = diag
        self.full_ = diag_to_full(diag, self._subset(utts, self.full_subset, rng))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "full_")
        return tandem_posteriors(self.diag_, self.full_, X, self.top_n)

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "full_")
        return self.full_.score_samples(X)

    @property
    def num_classes(self) -> int:
        return self.n_components

    def to_container(self) -> ModelContainer:
        c = ModelContainer({"type": "TandemUbm", "top_n": int(self.top_n)})
        c["weights"], c["means"] = self.diag_.weights_, self.diag_.means_
        c["variances"], c["covariances"] = self.diag_.variances_, self.full_.covariances_
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "TandemUbm":
        ubm = cls(n_components=len(c["weights"]), top_n=int(c.metadata["top_n"]))
        ubm.diag_ = DiagGmm.from_params(c["weights"], c["means"], c["variances"])
        ubm.full_ = FullGmm(c["weights"], c["means"], c["covariances"])
        return ubm
