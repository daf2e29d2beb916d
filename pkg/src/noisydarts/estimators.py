"""scikit-learn style wrappers around search and retraining.

``NoisyDARTSSearch.fit(X, y)`` runs a search on image arrays and exposes the
derived genotype; ``GenotypeClassifier`` trains the discrete network for a
genotype and predicts labels.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bilevel import RetrainConfig, SearchConfig, retrain, search
from .data import DatasetSplit, stratified_halves
from .network import Context, predict_logits
from .noise import NoisePolicy
from .searchspace import Genotype, build_space, count_op

__all__ = ["NoisyDARTSSearch", "GenotypeClassifier"]


def _check_images(X, y=None):
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float64)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, channels, height, width), got {X.shape}")
    return X, y


def _encode(y):
    classes, idx = np.unique(y, return_inverse=True)
    return classes, idx.astype(int)


class NoisyDARTSSearch(BaseEstimator):
    """Differentiable architecture search with noise on candidate-op outputs.

    ``fit`` splits ``(X, y)`` class by class into equal train/val halves,
    runs the alternating search and stores ``genotype_``, ``record_`` and
    ``supernet_``. ``predict`` uses the supernet in eval mode.
    """

    def __init__(self, space="nasbench201", placement="ofs", sigma=0.2, distribution="gaussian",
                 mode="additive", mu=None, schedule="fixed", drop_rate=0.0, epochs=25, batch_size=64,
                 w_lr=0.025, alpha_lr=3e-4, channels=8, layers=5, stages=None, random_state=0):
        self.space = space
        self.placement = placement
        self.sigma = sigma
        self.distribution = distribution
        self.mode = mode
        self.mu = mu
        self.schedule = schedule
        self.drop_rate = drop_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.w_lr = w_lr
        self.alpha_lr = alpha_lr
        self.channels = channels
        self.layers = layers
        self.stages = stages
        self.random_state = random_state

    def _policy(self) -> NoisePolicy:
        return NoisePolicy(self.distribution, self.mode, self.placement, self.mu, self.sigma,
                           self.schedule, drop_rate=self.drop_rate)

    def fit(self, X, y):
        X, y = _check_images(X, y)
        self.classes_, yi = _encode(y)
        k = len(self.classes_)
        a, b = stratified_halves(yi, k)
        empty_x = np.zeros((0,) + X.shape[1:])
        data = DatasetSplit(X[a], yi[a], X[b], yi[b], empty_x, np.zeros(0, int), k,
                            train_ids=a, val_ids=b)
        self.space_ = build_space(self.space)
        hyper = SearchConfig(epochs=self.epochs, batch_size=self.batch_size, w_lr=self.w_lr,
                             alpha_lr=self.alpha_lr, channels=self.channels, layers=self.layers,
                             stages=self.stages)
        from .bilevel import build_supernet
        self.supernet_ = build_supernet(self.space_, data, hyper, int(self.random_state))
        self.record_ = search(self.space_, self._policy(), data, hyper, int(self.random_state),
                              net=self.supernet_)
        self.genotype_ = self.record_.genotype
        self.normalization_ = (data.mean, data.std)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _normalize(self, X):
        mean, std = self.normalization_
        return (X - mean[:, None, None]) / std[:, None, None]

    def predict(self, X):
        check_is_fitted(self, "genotype_")
        X, _ = _check_images(X)
        logits = predict_logits(self.supernet_, self._normalize(X), ctx=Context.eval())
        return self.classes_[np.argmax(logits, axis=1)]

    def skip_count(self) -> int:
        check_is_fitted(self, "genotype_")
        return count_op(self.genotype_, "skip_connect")


class GenotypeClassifier(BaseEstimator, ClassifierMixin):
    """Stand-alone network for a fixed genotype, trained with cosine-schedule SGD."""

    def __init__(self, genotype=None, space="nasbench201", epochs=30, batch_size=64, lr=0.025,
                 channels=8, layers=5, stages=None, random_state=0):
        self.genotype = genotype
        self.space = space
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.channels = channels
        self.layers = layers
        self.stages = stages
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_images(X, y)
        if self.genotype is None:
            raise ValueError("GenotypeClassifier needs a genotype")
        geno = self.genotype if isinstance(self.genotype, Genotype) else Genotype.from_json(self.genotype)
        self.classes_, yi = _encode(y)
        k = len(self.classes_)
        # everything goes to train; the retrain routine trains on train+val
        empty_x = np.zeros((0,) + X.shape[1:])
        data = DatasetSplit(X, yi, empty_x, np.zeros(0, int), empty_x, np.zeros(0, int), k)
        hyper = RetrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                              channels=self.channels, layers=self.layers, stages=self.stages)
        result = retrain(geno, build_space(self.space), data, hyper, int(self.random_state))
        self.net_ = result.net
        self.train_loss_ = result.train_loss
        self.normalization_ = (data.mean, data.std)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X, _ = _check_images(X)
        mean, std = self.normalization_
        logits = predict_logits(self.net_, (X - mean[:, None, None]) / std[:, None, None])
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
