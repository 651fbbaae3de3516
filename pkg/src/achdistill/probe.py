"""Linear probe: how well frozen latents predict the next achievement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndauto as nd
from .ndauto import Tensor
from .policy_net import AgentNet
from .trajectory import Trajectory


class LinearProbe:
    """Multinomial logistic regression trained by full-batch Adam.

    Follows the fit / predict / predict_proba / score convention. Labels may
    be any integers; they are mapped onto ``classes_``.
    """

    def __init__(self, learning_rate: float = 1e-3, epochs: int = 500, seed: int = 0, n_classes: int | None = None):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.n_classes = n_classes

    def get_params(self, deep: bool = True) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs, "seed": self.seed, "n_classes": self.n_classes}

    def set_params(self, **params) -> "LinearProbe":
        for k, v in params.items():
            if k not in self.get_params():
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def fit(self, X, y) -> "LinearProbe":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
            raise ValueError("X must be (n, d) with one label per row")
        if self.n_classes is None:
            self.classes_ = np.unique(y)
        else:
            self.classes_ = np.arange(self.n_classes)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("labels outside the known classes")
        n, d = X.shape
        k = len(self.classes_)
        rng = np.random.default_rng(self.seed)
        params = {
            "w": Tensor(rng.standard_normal((d, k)) * 0.01, requires_grad=True),
            "b": Tensor(np.zeros(k), requires_grad=True),
        }
        opt = nd.AdamState(learning_rate=self.learning_rate)
        onehot = np.eye(k)[idx]
        Xt = Tensor(X)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            logp = nd.log_softmax(nd.linear(Xt, params["w"], params["b"]), axis=-1)
            loss = -(logp * Tensor(onehot)).sum(axis=-1).mean()
            self.loss_curve_.append(float(loss.data))
            nd.adam_step(params, nd.backward(loss, params), opt)
        self.coef_ = params["w"].data.copy()
        self.intercept_ = params["b"].data.copy()
        return self

    def predict_proba(self, X) -> np.ndarray:
        logits = np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def label_confidence(self, X, y) -> np.ndarray:
        """Probability assigned to each example's true label (0 if unseen)."""
        p = self.predict_proba(X)
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.minimum(idx, len(self.classes_) - 1)
        known = self.classes_[idx] == y
        return np.where(known, p[np.arange(len(y)), idx], 0.0)


def next_achievement_dataset(net: AgentNet, trajectories: Sequence[Trajectory], params=None, chunk: int = 4096):
    """Frozen latents phi(s_t) and the environment id of g_t^+, for every step
    that has a next achievement."""
    obs, labels = [], []
    for tr in trajectories:
        ok = tr.next_index >= 0
        if not ok.any():
            continue
        obs.append(tr.observations[:-1][ok])
        labels.append(tr.achievement_ids[tr.next_index[ok]])
    if not obs:
        return np.zeros((0, net.latent_size)), np.zeros(0, dtype=np.int64)
    obs = np.concatenate(obs)
    feats = []
    with nd.no_grad():
        for i in range(0, len(obs), chunk):
            feats.append(net.encode(obs[i : i + chunk], params).data.astype(np.float64))
    return np.concatenate(feats), np.concatenate(labels).astype(np.int64)


def split_dataset(X, y, n_train: int, n_test: int, rng: np.random.Generator):
    """Random disjoint train/test subsample.

    When fewer than ``n_train + n_test`` examples exist, both sizes shrink
    proportionally and a warning is issued.
    """
    n = len(y)
    want = n_train + n_test
    if want <= 0:
        raise ValueError("need a positive split size")
    if n < want:
        frac = n / want
        n_train2 = int(np.floor(n_train * frac))
        n_test2 = n - n_train2
        warnings.warn(
            f"only {n} labelled states for a {n_train}/{n_test} split; using {n_train2}/{n_test2}",
            RuntimeWarning,
            stacklevel=2,
        )
        n_train, n_test = n_train2, n_test2
    perm = rng.permutation(n)
    tr, te = perm[:n_train], perm[n_train : n_train + n_test]
    return X[tr], y[tr], X[te], y[te]


@dataclass
class ProbeResult:
    accuracy: float
    confidences: np.ndarray
    median_confidence: float
    n_train: int
    n_test: int
    n_classes: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "median_confidence": self.median_confidence,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_classes": self.n_classes,
        }


def run_probe(
    net: AgentNet,
    trajectories: Sequence[Trajectory],
    n_train: int = 50_000,
    n_test: int = 10_000,
    seed: int = 0,
    epochs: int = 500,
    learning_rate: float = 1e-3,
    params=None,
) -> ProbeResult:
    X, y = next_achievement_dataset(net, trajectories, params)
    if len(y) < 2:
        raise ValueError("probe needs at least two labelled states")
    Xtr, ytr, Xte, yte = split_dataset(X, y, n_train, n_test, np.random.default_rng(seed))
    probe = LinearProbe(learning_rate, epochs, seed).fit(Xtr, ytr)
    conf = probe.label_confidence(Xte, yte)
    return ProbeResult(probe.score(Xte, yte), conf, float(np.median(conf)), len(ytr), len(yte), len(probe.classes_))
