"""Multisplice time-delay network with p-norm hidden layers (numpy).

Each layer splices its input at a set of frame offsets, applies an affine
map and then, for hidden layers, a p-norm nonlinearity followed by RMS
normalisation.  The last layer is a softmax over frame classes.  Layers are
evaluated "valid" style over an input that has been repeat-padded by the
total left/right context, so output row ``t`` depends only on input frames
inside the receptive field of ``t``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_frames
from .corpusio import ModelContainer

logger = logging.getLogger(__name__)

DEFAULT_SPLICES = ((-2, -1, 0, 1, 2), (-2, 1), (0,), (-3, 3), (-7, 2), (0,))
NORM_EPS = 1e-10


@dataclass(frozen=True)
class TddnnConfig:
    input_dim: int = 40
    splice_offsets: Tuple[Tuple[int, ...], ...] = DEFAULT_SPLICES
    hidden_dim: int = 256
    pnorm_group_size: int = 8
    pnorm_p: float = 2.0
    num_classes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "splice_offsets",
                           tuple(tuple(int(o) for o in offs) for offs in self.splice_offsets))

    @property
    def num_layers(self) -> int:
        return len(self.splice_offsets)

    @property
    def pnorm_dim(self) -> int:
        return self.hidden_dim // self.pnorm_group_size

    def validate(self) -> None:
        if self.num_layers < 1 or any(len(o) == 0 for o in self.splice_offsets):
            raise ValueError("every layer needs at least one splice offset")
        if self.hidden_dim % self.pnorm_group_size:
            raise ValueError("hidden_dim must be divisible by pnorm_group_size")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pnorm_p < 1:
            raise ValueError("pnorm_p must be >= 1")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")

    @property
    def context(self) -> Tuple[int, int]:
        """Total (left, right) frames of context."""
        left = sum(-min(min(o), 0) for o in self.splice_offsets)
        right = sum(max(max(o), 0) for o in self.splice_offsets)
        return left, right


@dataclass(frozen=True)
class SgdSchedule:
    initial_lr: float = 0.0015
    final_lr: float = 0.00015
    num_epochs: int = 6
    minibatch_size: int = 256
    chunk_len: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.final_lr <= self.initial_lr:
            raise ValueError("need 0 < final_lr <= initial_lr")
        if self.num_epochs < 1:
            raise ValueError("num_epochs must be >= 1")
        if self.minibatch_size < 1 or self.chunk_len < 1:
            raise ValueError("minibatch_size and chunk_len must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Geometric decay from ``initial_lr`` (first epoch) to ``final_lr`` (last)."""
        if self.num_epochs == 1:
            return self.initial_lr
        return self.initial_lr * (self.final_lr / self.initial_lr) ** (epoch / (self.num_epochs - 1))


@dataclass
class TddnnModel:
    config: TddnnConfig
    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)

    def copy(self) -> "TddnnModel":
        return TddnnModel(self.config, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases])

    def to_container(self) -> ModelContainer:
        meta = asdict(self.config)
        meta["splice_offsets"] = [list(o) for o in self.config.splice_offsets]
        c = ModelContainer({"type": "TddnnModel", "config": meta})
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            c[f"layer{i}.weight"], c[f"layer{i}.bias"] = w, b
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "TddnnModel":
        meta = dict(c.metadata["config"])
        meta["splice_offsets"] = tuple(tuple(o) for o in meta["splice_offsets"])
        cfg = TddnnConfig(**meta)
        return cls(cfg, [c[f"layer{i}.weight"] for i in range(cfg.num_layers)],
                   [c[f"layer{i}.bias"] for i in range(cfg.num_layers)])


def build_tddnn(cfg: TddnnConfig, seed: int = 0) -> TddnnModel:
    """Scaled-uniform initialisation (std ``1/sqrt(fan_in)``), zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    model = TddnnModel(cfg)
    in_dim = cfg.input_dim
    for i, offs in enumerate(cfg.splice_offsets):
        out_dim = cfg.num_classes if i == cfg.num_layers - 1 else cfg.hidden_dim
        fan_in = len(offs) * in_dim
        a = np.sqrt(3.0 / fan_in)
        model.weights.append(rng.uniform(-a, a, size=(fan_in, out_dim)))
        model.biases.append(np.zeros(out_dim))
        in_dim = cfg.pnorm_dim
    return model


# --- layer primitives ---------------------------------------------------------

def _splice(H: np.ndarray, offs: Sequence[int]) -> np.ndarray:
    lo, hi = min(min(offs), 0), max(max(offs), 0)
    L = H.shape[1] - (hi - lo)
    if L < 1:
        raise ValueError("input shorter than the layer context")
    return np.concatenate([H[:, o - lo:o - lo + L] for o in offs], axis=2)


def _unsplice(dS: np.ndarray, offs: Sequence[int], in_len: int) -> np.ndarray:
    lo = min(min(offs), 0)
    B, L, _ = dS.shape
    d = dS.shape[2] // len(offs)
    dH = np.zeros((B, in_len, d))
    for k, o in enumerate(offs):
        dH[:, o - lo:o - lo + L] += dS[:, :, k * d:(k + 1) * d]
    return dH


def pnorm(z: np.ndarray, group: int, p: float) -> np.ndarray:
    """``(sum_{i in g} |z_i|^p)^(1/p)`` over consecutive groups of ``group`` units."""
    zg = z.reshape(z.shape[:-1] + (-1, group))
    if p == 2.0:
        return np.sqrt(np.sum(zg * zg, axis=-1))
    return np.sum(np.abs(zg) ** p, axis=-1) ** (1.0 / p)


def _pnorm_backward(z, y, dy, group, p):
    zg = z.reshape(z.shape[:-1] + (-1, group))
    safe = np.where(y > 0, y, 1.0)[..., None]
    if p == 2.0:
        dz = zg / safe * dy[..., None]
    else:
        dz = np.sign(zg) * np.abs(zg) ** (p - 1) / safe ** (p - 1) * dy[..., None]
    dz = np.where((y > 0)[..., None], dz, 0.0)
    return dz.reshape(z.shape)


def _normalize(x):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x / r, r


def _normalize_backward(x, r, dy):
    n = x.shape[-1]
    return dy / r - x * np.sum(x * dy, axis=-1, keepdims=True) / (n * r ** 3)


def _forward(model: TddnnModel, X: np.ndarray, keep: bool = False):
    """Batched forward over ``X`` (B, L_in, D); returns logits and a cache."""
    cfg = model.config
    H = X
    cache = []
    last = cfg.num_layers - 1
    for i, offs in enumerate(cfg.splice_offsets):
        S = _splice(H, offs)
        Z = S @ model.weights[i] + model.biases[i]
        if i == last:
            if keep:
                cache.append((H.shape[1], S, None, None, None))
            return Z, cache
        Y = pnorm(Z, cfg.pnorm_group_size, cfg.pnorm_p)
        Hn, r = _normalize(Y)
        if keep:
            cache.append((H.shape[1], S, Z, Y, r))
        H = Hn
    raise AssertionError("unreachable")


def _backward(model: TddnnModel, cache, dlogits: np.ndarray):
    cfg = model.config
    gw = [None] * cfg.num_layers
    gb = [None] * cfg.num_layers
    dZ = dlogits
    for i in range(cfg.num_layers - 1, -1, -1):
        in_len, S, _, _, _ = cache[i]
        gw[i] = S.reshape(-1, S.shape[2]).T @ dZ.reshape(-1, dZ.shape[2])
        gb[i] = dZ.sum(axis=(0, 1))
        if i == 0:
            break
        dS = dZ @ model.weights[i].T
        dH = _unsplice(dS, cfg.splice_offsets[i], in_len)
        _, _, Zp, Yp, rp = cache[i - 1]
        dY = _normalize_backward(Yp, rp, dH)
        dZ = _pnorm_backward(Zp, Yp, dY, cfg.pnorm_group_size, cfg.pnorm_p)
    return gw, gb


def pad_utterance(feats: np.ndarray, cfg: TddnnConfig) -> np.ndarray:
    left, right = cfg.context
    idx = np.clip(np.arange(-left, feats.shape[0] + right), 0, feats.shape[0] - 1)
    return feats[idx]


def forward(model: TddnnModel, feats, log: bool = False) -> np.ndarray:
    """Per-frame class posteriors (or log-posteriors) for one utterance."""
    feats = as_frames(feats, model.config.input_dim, "feats")
    logits, _ = _forward(model, pad_utterance(feats, model.config)[None])
    logp = log_softmax(logits[0], axis=1)
    return logp if log else np.exp(logp)


def loss_and_grad(model: TddnnModel, X: np.ndarray, labels: np.ndarray):
    """Summed cross-entropy over a batch of padded chunks and its gradient.

    ``X`` is (B, L + context, D) and ``labels`` is (B, L).
    """
    logits, cache = _forward(model, X, keep=True)
    logp = log_softmax(logits, axis=2)
    B, L, C = logp.shape
    onehot = np.zeros_like(logp)
    onehot[np.arange(B)[:, None], np.arange(L)[None, :], labels] = 1.0
    loss = -float(np.sum(logp * onehot))
    gw, gb = _backward(model, cache, np.exp(logp) - onehot)
    return loss, gw, gb


def _chunks(targets, chunk_len: int):
    """(utterance index, first output frame) for every chunk."""
    out = []
    for u, labels in enumerate(targets):
        T = labels.shape[0]
        for s in range(0, T, chunk_len):
            out.append((u, min(s, max(T - chunk_len, 0))))
    return out


def train_sgd(model: TddnnModel, data: Sequence[Tuple[np.ndarray, np.ndarray]],
              sched: SgdSchedule = SgdSchedule(), log_fh=None) -> TddnnModel:
    """Mini-batch SGD on frame cross-entropy; returns a new model.

    Gradients are summed over the frames of a minibatch and the learning
    rate decays geometrically per epoch.  Minibatch order is fixed by
    ``sched.seed``.
    """
    sched.validate()
    cfg = model.config
    if not data:
        raise ValueError("no training data")
    padded, targets = [], []
    for feats, labels in data:
        feats = as_frames(feats, cfg.input_dim, "feats")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise ValueError(f"{labels.size} labels for {feats.shape[0]} frames")
        if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
            raise ValueError(f"label out of range [0, {cfg.num_classes})")
        padded.append(pad_utterance(feats, cfg))
        targets.append(labels)
    chunk = sched.chunk_len
    min_len = min(t.size for t in targets)
    if min_len < chunk:
        chunk = max(1, min_len)
    items = _chunks(targets, chunk)
    left, right = cfg.context
    win = chunk + left + right
    per_batch = max(1, sched.minibatch_size // chunk)
    rng = np.random.default_rng(sched.seed)
    model = model.copy()
    history = []
    for epoch in range(sched.num_epochs):
        lr = sched.learning_rate(epoch)
        order = rng.permutation(len(items))
        total_loss, total_frames = 0.0, 0
        for s in range(0, len(order), per_batch):
            batch = [items[i] for i in order[s:s + per_batch]]
            X = np.stack([padded[u][f:f + win] for u, f in batch])
            Y = np.stack([targets[u][f:f + chunk] for u, f in batch])
            loss, gw, gb = loss_and_grad(model, X, Y)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss in epoch {epoch}")
            for i in range(cfg.num_layers):
                model.weights[i] -= lr * gw[i]
                model.biases[i] -= lr * gb[i]
            total_loss += loss
            total_frames += Y.size
        ce = total_loss / total_frames
        history.append((epoch, lr, ce))
        logger.info("epoch %d lr %.6g cross-entropy %.5f", epoch, lr, ce)
        if log_fh is not None:
            log_fh.write(f"epoch {epoch} lr {lr:.8g} cross-entropy {ce:.6f}\n")
    model.training_log = history
    return model


def frame_cross_entropy(model: TddnnModel, data) -> float:
    total, frames = 0.0, 0
    for feats, labels in data:
        logp = forward(model, feats, log=True)
        total -= float(np.sum(logp[np.arange(len(labels)), labels]))
        frames += len(labels)
    return total / frames


class TddnnClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on lists of (feats, labels), ``predict_proba`` per utterance."""

    def __init__(self, input_dim=40, splice_offsets=DEFAULT_SPLICES, hidden_dim=256,
                 pnorm_group_size=8, pnorm_p=2.0, num_classes=64, initial_lr=0.0015,
                 final_lr=0.00015, num_epochs=6, minibatch_size=256, chunk_len=8,
                 random_state=0):
        self.input_dim = input_dim
        self.splice_offsets = splice_offsets
        self.hidden_dim = hidden_dim
        self.pnorm_group_size = pnorm_group_size
        self.pnorm_p = pnorm_p
        self.num_classes = num_classes
        self.initial_lr = initial_lr
        self.final_lr = final_lr
        self.num_epochs = num_epochs
        self.minibatch_size = minibatch_size
        self.chunk_len = chunk_len
        self.random_state = random_state

    def _config(self) -> TddnnConfig:
        return TddnnConfig(self.input_dim, self.splice_offsets, self.hidden_dim,
                           self.pnorm_group_size, self.pnorm_p, self.num_classes)

    def fit(self, X, y, log_fh=None):
        sched = SgdSchedule(self.initial_lr, self.final_lr, self.num_epochs,
                            self.minibatch_size, self.chunk_len, self.random_state)
        model = build_tddnn(self._config(), self.random_state)
        self.model_ = train_sgd(model, list(zip(X, y)), sched, log_fh)
        self.classes_ = np.arange(self.num_classes)
        return self

    @classmethod
    def from_model(cls, model: TddnnModel) -> "TddnnClassifier":
        cfg = model.config
        est = cls(cfg.input_dim, cfg.splice_offsets, cfg.hidden_dim, cfg.pnorm_group_size,
                  cfg.pnorm_p, cfg.num_classes)
        est.model_ = model
        est.classes_ = np.arange(cfg.num_classes)
        return est

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return forward(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)
