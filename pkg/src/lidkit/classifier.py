"""Multinomial logistic regression over i-vectors.

This is the only model retrained when a language is added; everything
upstream (UBM, network, extractor) is left untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_frames
from .corpusio import ModelContainer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainOptions:
    l2_lambda: float = 1e-3
    max_iters: int = 500
    tolerance: float = 1e-6
    seed: int = 0


def objective_and_grad(W: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float):
    """Mean cross-entropy plus ``l2/2 * ||W[:, :-1]||^2`` and its gradient.

    ``W`` is ``K x (R+1)`` with the bias in the last column (not penalised);
    ``Y`` is the ``N x K`` one-hot target matrix.
    """
    N = X.shape[0]
    Xa = np.hstack([X, np.ones((N, 1))])
    logp = log_softmax(Xa @ W.T, axis=1)
    penalty = W[:, :-1]
    obj = -np.sum(Y * logp) / N + 0.5 * l2 * np.sum(penalty ** 2)
    grad = (np.exp(logp) - Y).T @ Xa / N
    grad[:, :-1] += l2 * penalty
    return obj, grad


def _gradient_descent(W, X, Y, opts: TrainOptions):
    obj, grad = objective_and_grad(W, X, Y, opts.l2_lambda)
    history = [obj]
    step = 1.0
    for it in range(opts.max_iters):
        gnorm2 = float(np.sum(grad ** 2))
        if np.sqrt(gnorm2) < opts.tolerance:
            break
        step *= 2.0
        while True:
            W_try = W - step * grad
            obj_try, grad_try = objective_and_grad(W_try, X, Y, opts.l2_lambda)
            if obj_try <= obj - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-20:
                logger.warning("line search stalled at iteration %d", it)
                return W, history
        W, obj, grad = W_try, obj_try, grad_try
        history.append(obj)
    return W, history


class LogRegClassifier(ClassifierMixin, BaseEstimator):
    """L2-regularised multinomial logistic regression.

    Trained by full-batch gradient descent with a backtracking (Armijo)
    line search; deterministic given the data.
    """

    def __init__(self, l2_lambda=1e-3, max_iters=500, tolerance=1e-6, random_state=0):
        self.l2_lambda = l2_lambda
        self.max_iters = max_iters
        self.tolerance = tolerance
        self.random_state = random_state

    def fit(self, X, y, classes: Optional[Sequence] = None):
        """Fit on ``X`` (N x R) and labels ``y``.

        ``classes`` fixes the class order (defaults to sorted unique labels).
        """
        X = as_frames(X)
        y = np.asarray(y)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y lengths differ")
        if classes is None:
            classes = np.unique(y)
        classes = np.asarray(list(classes))
        if len(set(classes.tolist())) != len(classes):
            raise ValueError("duplicate class labels")
        K = len(classes)
        if K < 2:
            raise ValueError("need at least two classes")
        index = {c: i for i, c in enumerate(classes.tolist())}
        missing = [c for c in classes.tolist() if c not in set(y.tolist())]
        if missing:
            raise ValueError(f"classes without training examples: {missing}")
        unknown = set(y.tolist()) - set(index)
        if unknown:
            raise ValueError(f"labels not in classes: {sorted(unknown)}")
        if X.shape[0] < K:
            raise ValueError(f"{X.shape[0]} examples for {K} classes")
        Y = np.zeros((X.shape[0], K))
        Y[np.arange(X.shape[0]), [index[v] for v in y.tolist()]] = 1.0
        opts = TrainOptions(self.l2_lambda, self.max_iters, self.tolerance, self.random_state)
        W0 = np.zeros((K, X.shape[1] + 1))
        self.coef_full_, self.objective_history_ = _gradient_descent(W0, X, Y, opts)
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def coef_(self):
        return self.coef_full_[:, :-1]

    @property
    def intercept_(self):
        return self.coef_full_[:, -1]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_full_")
        X = as_frames(X, self.n_features_in_)
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def to_container(self) -> ModelContainer:
        c = ModelContainer({"type": "LogRegModel",
                            "labels": [str(v) for v in self.classes_.tolist()]})
        c["weights"] = self.coef_full_
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "LogRegClassifier":
        model = cls()
        model.coef_full_ = c["weights"]
        model.classes_ = np.asarray(c.metadata["labels"])
        model.n_features_in_ = model.coef_full_.shape[1] - 1
        return model


def train_logreg(ivectors, labels, opts: TrainOptions = TrainOptions(),
                 classes: Optional[Sequence] = None) -> LogRegClassifier:
    return LogRegClassifier(opts.l2_lambda, opts.max_iters, opts.tolerance, opts.seed).fit(
        ivectors, labels, classes=classes)


def predict_posteriors(model: LogRegClassifier, w) -> np.ndarray:
    """Class posteriors for one i-vector (1-D) or a batch (2-D)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        return model.predict_proba(w[None, :])[0]
    return model.predict_proba(w)


def add_language(model: LogRegClassifier, new_ivectors, new_language, train_ivectors,
                 train_labels, opts: Optional[TrainOptions] = None) -> LogRegClassifier:
    """Retrain with one extra class appended to the existing label order."""
    check_is_fitted(model, "coef_full_")
    if new_language in set(model.classes_.tolist()):
        raise ValueError(f"language {new_language!r} already in the model")
    if opts is None:
        opts = TrainOptions(model.l2_lambda, model.max_iters, model.tolerance,
                            model.random_state)
    new_ivectors = as_frames(new_ivectors)
    X = np.vstack([as_frames(train_ivectors), new_ivectors])
    y = np.concatenate([np.asarray(train_labels, dtype=object),
                        np.array([new_language] * new_ivectors.shape[0], dtype=object)])
    classes = model.classes_.tolist() + [new_language]
    return train_logreg(X, y, opts, classes=classes)
