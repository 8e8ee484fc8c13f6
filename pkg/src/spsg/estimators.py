"""scikit-learn style wrappers around victim training and proxy stealing."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .nn import Network, OptimizerState, train_step
from .proxy import StealConfig, predict_batched, steal
from .spgq import QuerySet


def train_victim(arch, images, labels, epochs=12, learning_rate=0.1, momentum=0.5,
                 batch_size=64, seed=0) -> Network:
    """Plain momentum-SGD cross-entropy training with a seeded shuffle."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    net = Network(arch, images.shape[1:], seed=seed)
    opt = OptimizerState(learning_rate, momentum, decay_factor=1.0, decay_period=0)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            train_step(net, images[idx], labels[idx], opt)
        opt.end_epoch()
    return net


class _NetworkClassifier(ClassifierMixin, BaseEstimator):
    def _check_images(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        shape = self.network_.input_shape
        if X.shape[1:] != shape:
            X = X.reshape(len(X), *shape)
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_images(X)
        return np.concatenate([self.network_.forward(X[i:i + 1000]) for i in range(0, len(X), 1000)])

    def predict(self, X) -> np.ndarray:
        return self.classes_[predict_batched(self.network_, self._check_images(X))]


class VictimClassifier(_NetworkClassifier):
    def __init__(self, arch="conv:8:5,relu,maxpool:2,conv:16:5,relu,maxpool:2,dense:10",
                 epochs=15, learning_rate=0.1, momentum=0.5, batch_size=64, seed=0):
        self.arch = arch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected N×C×H×W images, got shape {X.shape}")
        y = np.asarray(y, dtype=np.int64)
        self.network_ = train_victim(self.arch, X, y, self.epochs, self.learning_rate,
                                     self.momentum, self.batch_size, self.seed)
        self.classes_ = np.arange(self.network_.num_classes)
        return self


class ProxyStealer(_NetworkClassifier):
    """Fits a proxy on a :class:`~spsg.spgq.QuerySet` passed as ``X``."""

    def __init__(self, proxy_arch="conv:8:5,relu,maxpool:2,conv:16:5,relu,maxpool:2,dense:10",
                 beta=0.5, epochs=200, batch_size=64, learning_rate=0.01, momentum=0.5,
                 decay_factor=0.1, decay_period=60, grad1_superpixel_sample=8,
                 prob_loss_variant="standard_kd", grad2_mode="exact",
                 proxy_gradient_view="masked", use_gradients=True, seed=0):
        self.proxy_arch = proxy_arch
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_period = decay_period
        self.grad1_superpixel_sample = grad1_superpixel_sample
        self.prob_loss_variant = prob_loss_variant
        self.grad2_mode = grad2_mode
        self.proxy_gradient_view = proxy_gradient_view
        self.use_gradients = use_gradients
        self.seed = seed

    def steal_config(self, mode) -> StealConfig:
        params = self.get_params()
        params.pop("proxy_arch")
        return StealConfig(mode=mode, **params)

    def fit(self, X: QuerySet, y=None, validation=None):
        if not isinstance(X, QuerySet):
            raise TypeError("ProxyStealer.fit expects a QuerySet")
        config = self.steal_config(X.mode)
        config.epsilon = X.epsilon
        self.network_, self.history_ = steal(X, self.proxy_arch, config, validation)
        self.classes_ = np.arange(self.network_.num_classes)
        return self
