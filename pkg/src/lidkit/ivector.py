"""Total-variability modelling: supervised-GMM initialisation, EM training of
the loading matrix and posterior-mean i-vector extraction.

Per class ``c`` the model stores a mean ``mu_c``, a diagonal covariance
``Sigma_c`` and a ``D x R`` loading block ``T_c``.  For one utterance with
centered statistics ``(N_c, Fh_c)``::

    L    = I + sum_c N_c T_c' Sigma_c^-1 T_c
    E[w] = L^-1 sum_c T_c' Sigma_c^-1 Fh_c
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_frames, check_posteriors
from .corpusio import ModelContainer
from .stats import SuffStats

logger = logging.getLogger(__name__)


@dataclass
class SupervisedGmm:
    means: np.ndarray
    variances: np.ndarray
    priors: np.ndarray


@dataclass
class Ivector:
    w: np.ndarray
    precision: Optional[np.ndarray] = None


class SupervisedGmmAccumulator:
    """Posterior-weighted moments for :func:`init_supervised_gmm`, one utterance at a time."""

    def __init__(self, var_floor: float = 1e-3):
        self.var_floor = var_floor
        self.frames = 0
        self.n = self.f = self.s = self.total = self.total_sq = None

    def add(self, post, feats) -> None:
        post = check_posteriors(post)
        feats = as_frames(feats, name="feats")
        if post.shape[0] != feats.shape[0]:
            raise ValueError(f"posterior rows {post.shape[0]} != feature rows {feats.shape[0]}")
        if self.n is None:
            M, D = post.shape[1], feats.shape[1]
            self.n, self.f, self.s = np.zeros(M), np.zeros((M, D)), np.zeros((M, D))
            self.total, self.total_sq = np.zeros(D), np.zeros(D)
        sq = feats ** 2
        self.n += post.sum(axis=0)
        self.f += post.T @ feats
        self.s += post.T @ sq
        self.frames += feats.shape[0]
        self.total += feats.sum(axis=0)
        self.total_sq += sq.sum(axis=0)

    def finalize(self) -> SupervisedGmm:
        if self.n is None or self.frames == 0:
            raise ValueError("no data for supervised GMM")
        g_mean = self.total / self.frames
        g_var = self.total_sq / self.frames - g_mean ** 2
        live = self.n >= 1.0
        if not live.all():
            logger.warning("%d classes with occupancy < 1 use global statistics",
                           int((~live).sum()))
        safe = np.where(live, self.n, 1.0)[:, None]
        means = np.where(live[:, None], self.f / safe, g_mean)
        var = np.where(live[:, None], self.s / safe - means ** 2, g_var)
        var = np.maximum(var, self.var_floor * g_var)
        return SupervisedGmm(means, var, self.n / self.n.sum())


def init_supervised_gmm(utterances: Iterable[Tuple[np.ndarray, np.ndarray]],
                        var_floor: float = 1e-3) -> SupervisedGmm:
    """Class-conditional Gaussians from network posteriors and stats features.

    ``utterances`` yields ``(posteriors, feats)`` pairs with matching rows.
    Classes with less than one frame of occupancy fall back to the global
    mean and variance.  Variances are floored at ``var_floor`` times the
    global variance.
    """
    acc = SupervisedGmmAccumulator(var_floor)
    for post, feats in utterances:
        acc.add(post, feats)
    return acc.finalize()


class IvectorExtractor(TransformerMixin, BaseEstimator):
    """Total-variability i-vector extractor.

    ``means`` and ``variances`` (both ``M x D``) come from the UBM or the
    supervised GMM and stay fixed; only the loading matrix is trained.
    ``fit`` and ``transform`` take sequences of :class:`SuffStats`;
    uncentered statistics are centered on ``means``.
    """

    def __init__(self, means=None, variances=None, ivector_dim=50, n_iter=5, random_state=0):
        self.means = means
        self.variances = variances
        self.ivector_dim = ivector_dim
        self.n_iter = n_iter
        self.random_state = random_state

    def _init_model(self) -> None:
        if self.means is None or self.variances is None:
            raise ValueError("IvectorExtractor needs means and variances")
        self.means_ = np.asarray(self.means, dtype=np.float64)
        self.variances_ = np.asarray(self.variances, dtype=np.float64)
        if self.means_.shape != self.variances_.shape or np.any(self.variances_ <= 0):
            raise ValueError("means/variances must share shape and variances be positive")
        if self.ivector_dim < 1:
            raise ValueError("ivector_dim must be >= 1")
        M, D = self.means_.shape
        R = self.ivector_dim
        rng = np.random.default_rng(self.random_state)
        scale = 0.1 * np.sqrt(self.variances_.mean(axis=1)) / np.sqrt(R)
        self.T_ = rng.standard_normal((M, D, R)) * scale[:, None, None]

    def fit(self, X, y=None):
        stats = self._centered(X, init=True)
        self.objective_history_ = []
        model = self
        for it in range(self.n_iter):
            model, obj = em_iteration(model, stats)
            self.objective_history_.append(obj)
            logger.info("ivector EM iteration %d objective %.6f", it, obj)
        self.T_ = model.T_
        if self.n_iter:
            self.objective_history_.append(log_likelihood(self, stats))
        return self

    def _centered(self, X, init: bool = False) -> List[SuffStats]:
        if init:
            self._init_model()
        out = []
        for s in X:
            if s.f.shape != self.means_.shape:
                raise ValueError(f"stats shape {s.f.shape} != model shape {self.means_.shape}")
            out.append(s if s.centered else s.center(self.means_))
        return out

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "T_")
        stats = self._centered(X)
        if not stats:
            return np.zeros((0, self.T_.shape[2]))
        n = np.array([s.n for s in stats])
        f = np.array([s.f for s in stats])
        w, _ = _posterior(self, n, f)
        return w

    def extract(self, stats: SuffStats) -> Ivector:
        return extract_ivector(self, stats)

    def to_container(self) -> ModelContainer:
        c = ModelContainer({"type": "IvectorExtractor", "ivector_dim": int(self.T_.shape[2])})
        c["means"], c["variances"], c["T"] = self.means_, self.variances_, self.T_
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "IvectorExtractor":
        ext = cls(c["means"], c["variances"], ivector_dim=int(c.metadata["ivector_dim"]))
        ext.means_, ext.variances_, ext.T_ = c["means"], c["variances"], c["T"]
        return ext


def _class_products(ext: IvectorExtractor) -> Tuple[np.ndarray, np.ndarray]:
    """``T_c' Sigma_c^-1`` scaled loadings and ``T_c' Sigma_c^-1 T_c`` per class."""
    TS = ext.T_ / ext.variances_[:, :, None]
    U = np.einsum("cdr,cds->crs", TS, ext.T_)
    return TS, U


def _posterior(ext: IvectorExtractor, n: np.ndarray, f: np.ndarray):
    """Posterior means and precisions for stacked stats ``n`` (U, M), ``f`` (U, M, D)."""
    TS, U = _class_products(ext)
    R = ext.T_.shape[2]
    L = np.eye(R)[None] + np.einsum("uc,crs->urs", n, U)
    b = np.einsum("ucd,cdr->ur", f, TS)
    w = np.linalg.solve(L, b[:, :, None])[:, :, 0]
    return w, L


def _objective(L: np.ndarray, b_dot_w: np.ndarray) -> float:
    _, logdet = np.linalg.slogdet(L)
    return float(np.sum(0.5 * b_dot_w - 0.5 * logdet))


def _stack(stats: Sequence[SuffStats]):
    for s in stats:
        if not s.centered:
            raise ValueError("em_iteration expects centered statistics")
    return np.array([s.n for s in stats]), np.array([s.f for s in stats])


def log_likelihood(ext: IvectorExtractor, stats: Sequence[SuffStats]) -> float:
    """Marginal log-likelihood of the statistics up to model-independent terms.

    ``sum_u 0.5 b_u' L_u^-1 b_u - 0.5 log|L_u|``; EM never decreases it.
    """
    n, f = _stack(stats)
    w, L = _posterior(ext, n, f)
    b = np.einsum("urs,us->ur", L, w)
    return _objective(L, np.sum(b * w, axis=1))


def em_iteration(ext: IvectorExtractor, stats: Sequence[SuffStats]):
    """One E/M step on the loading matrix.

    Returns the updated extractor (a copy) and the objective of the input
    model, which EM guarantees will not decrease on the next call.
    """
    check_is_fitted(ext, "T_")
    n, f = _stack(stats)
    if f.shape[1:] != ext.means_.shape:
        raise ValueError(f"stats shape {f.shape[1:]} != model shape {ext.means_.shape}")
    w, L = _posterior(ext, n, f)
    b = np.einsum("urs,us->ur", L, w)
    obj = _objective(L, np.sum(b * w, axis=1))
    R = w.shape[1]
    eww = np.linalg.inv(L) + w[:, :, None] * w[:, None, :]
    C = np.einsum("ucd,ur->cdr", f, w)
    A = np.einsum("uc,urs->crs", n, eww)
    T_new = ext.T_.copy()
    for c in range(A.shape[0]):
        tr = np.trace(A[c])
        if tr <= 0:
            continue
        try:
            T_new[c] = np.linalg.solve(A[c], C[c].T).T
        except np.linalg.LinAlgError:
            ridge = 1e-8 * tr / R
            logger.warning("class %d normal matrix singular; adding ridge %.3g", c, ridge)
            T_new[c] = np.linalg.solve(A[c] + ridge * np.eye(R), C[c].T).T
    new = copy.copy(ext)
    new.T_ = T_new
    return new, obj


def extract_ivector(ext: IvectorExtractor, stats: SuffStats) -> Ivector:
    check_is_fitted(ext, "T_")
    if stats.f.shape != ext.means_.shape:
        raise ValueError(f"stats shape {stats.f.shape} != model shape {ext.means_.shape}")
    if not stats.centered:
        stats = stats.center(ext.means_)
    w, L = _posterior(ext, stats.n[None], stats.f[None])
    return Ivector(w[0], L[0])
