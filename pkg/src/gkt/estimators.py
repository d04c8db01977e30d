"""scikit-learn style wrappers around the simulated training loops.

``fit`` partitions the training set over simulated clients (for the
federated estimators), trains, and keeps the resulting models. Images are
normalized with the training-set channel statistics.

>>> from gkt.data import synthetic_pair
>>> train, test = synthetic_pair(4, 40, 8, seed=0)
>>> clf = GKTClassifier(num_clients=2, rounds=2, server_epochs=1).fit(train.images, train.labels)
>>> clf.predict(test.images).shape
(160,)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, dirichlet_partition, normalize
from .models import TOY_EDGE_WIDTH, TOY_SERVER_WIDTH, assemble_deployed_model, toy_specs
from .orchestrator import GktConfig, OptimizerSpec, run_centralized, run_fedavg, run_gkt
from .tensor import Tensor
from .tensor import functional as F
from .validation import check_images, check_positive_int, check_seed, check_targets


class _SplitModelEstimator(ClassifierMixin, BaseEstimator):
    """Shared plumbing: input checks, dataset construction, prediction."""

    def _prepare(self, X, y, eval_set):
        X = check_images(X, self.image_shape)
        classes, codes = check_targets(y, len(X))
        self.classes_ = classes
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        train = Dataset(X, codes, len(classes))
        self.mean_, self.std_ = train.mean, train.std
        self.input_shape_ = X.shape[1:]
        test = None
        if eval_set is not None:
            Xv, yv = eval_set
            Xv = check_images(Xv, self.image_shape)
            yv = np.asarray(yv)
            unknown = np.setdiff1d(yv, classes)
            if unknown.size:
                raise ValueError(f"eval_set contains labels unseen in training: {unknown[:5]}")
            test = Dataset(Xv, np.searchsorted(classes, yv), len(classes), "test", train.mean, train.std)
        c, h, w = X.shape[1:]
        if h != w:
            raise ValueError(f"square images required, got {h}x{w}")
        edge, server = toy_specs(len(classes), h, c, self.edge_width, self.server_width, self.server_depth)
        return train, test, edge, server

    def _config(self, num_clients: int, **kw) -> GktConfig:
        opt = OptimizerSpec(self.optimizer, self.learning_rate, weight_decay=self.weight_decay)
        return GktConfig(
            rounds=check_positive_int(self.rounds, "rounds"),
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            num_clients=num_clients,
            seed=check_seed(self.random_state),
            client_optimizer=opt,
            server_optimizer=opt,
            **kw,
        )

    def _model(self):
        raise NotImplementedError

    def _inputs(self, X) -> np.ndarray:
        check_is_fitted(self, "classes_")
        X = check_images(X, self.image_shape)
        if X.shape[1:] != tuple(self.input_shape_):
            raise ValueError(f"fitted on images of shape {tuple(self.input_shape_)}, got {X.shape[1:]}")
        return normalize(X, self.mean_, self.std_)

    def decision_function(self, X) -> np.ndarray:
        x = self._inputs(X)
        model = self._model()
        model.eval()
        return np.concatenate([model(Tensor(x[i:i + 512])).data for i in range(0, len(x), 512)])

    def predict_proba(self, X) -> np.ndarray:
        return F.softmax(Tensor(self.decision_function(X)), axis=-1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class GKTClassifier(_SplitModelEstimator):
    """Group knowledge transfer over ``num_clients`` simulated edge devices.

    Prediction uses the deployed model of client ``deploy_client``
    (its extractor followed by the shared server model); ``transform``
    returns that client's flattened feature maps.
    """

    def __init__(self, num_clients=4, alpha=0.5, rounds=15, client_epochs=1, server_epochs=2, batch_size=32,
                 optimizer="adam", learning_rate=3e-3, weight_decay=1e-4, temperature=5.0, mode="sync",
                 kd_mode="both", edge_width=TOY_EDGE_WIDTH, server_width=TOY_SERVER_WIDTH, server_depth="toy(1)",
                 min_client_size=10, deploy_client=0, image_shape=None, random_state=0):
        self.num_clients = num_clients
        self.alpha = alpha
        self.rounds = rounds
        self.client_epochs = client_epochs
        self.server_epochs = server_epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.mode = mode
        self.kd_mode = kd_mode
        self.edge_width = edge_width
        self.server_width = server_width
        self.server_depth = server_depth
        self.min_client_size = min_client_size
        self.deploy_client = deploy_client
        self.image_shape = image_shape
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        train, test, edge, server = self._prepare(X, y, eval_set)
        k = check_positive_int(self.num_clients, "num_clients")
        cfg = self._config(k, client_epochs=self.client_epochs, server_epochs=self.server_epochs,
                           temperature=self.temperature, mode=self.mode, kd_mode=self.kd_mode)
        if not 0 <= self.deploy_client < k:
            raise ValueError(f"deploy_client must lie in [0, {k}), got {self.deploy_client}")
        self.partition_ = dirichlet_partition(train, k, self.alpha, seed=cfg.seed, min_size=self.min_client_size)
        result = run_gkt(cfg, train, test, self.partition_, edge, server)
        self.edges_ = result.edges
        self.server_ = result.server
        self.metrics_ = result.metrics
        return self

    def _model(self):
        return assemble_deployed_model(self.edges_[self.deploy_client], self.server_)

    def transform(self, X) -> np.ndarray:
        x = self._inputs(X)
        ext = self.edges_[self.deploy_client].extractor
        ext.eval()
        out = [ext(Tensor(x[i:i + 512])).data for i in range(0, len(x), 512)]
        return np.concatenate(out).reshape(len(x), -1)


class FedAvgClassifier(_SplitModelEstimator):
    """FedAvg over the non-split model (extractor and server stacked)."""

    def __init__(self, num_clients=4, alpha=0.5, rounds=15, local_epochs=1, batch_size=32, optimizer="adam",
                 learning_rate=3e-3, weight_decay=1e-4, edge_width=TOY_EDGE_WIDTH, server_width=TOY_SERVER_WIDTH,
                 server_depth="toy(1)", min_client_size=10, image_shape=None, random_state=0):
        self.num_clients = num_clients
        self.alpha = alpha
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.edge_width = edge_width
        self.server_width = server_width
        self.server_depth = server_depth
        self.min_client_size = min_client_size
        self.image_shape = image_shape
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        train, test, edge, server = self._prepare(X, y, eval_set)
        k = check_positive_int(self.num_clients, "num_clients")
        cfg = self._config(k, client_epochs=self.local_epochs)
        self.partition_ = dirichlet_partition(train, k, self.alpha, seed=cfg.seed, min_size=self.min_client_size)
        result = run_fedavg(cfg, train, test, self.partition_, edge, server)
        self.model_ = result.model
        self.metrics_ = result.metrics
        return self

    def _model(self):
        return self.model_


class CentralizedClassifier(_SplitModelEstimator):
    """The non-split model trained on all data in one place."""

    def __init__(self, epochs=15, batch_size=32, optimizer="adam", learning_rate=3e-3, weight_decay=1e-4,
                 edge_width=TOY_EDGE_WIDTH, server_width=TOY_SERVER_WIDTH, server_depth="toy(1)", image_shape=None,
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.edge_width = edge_width
        self.server_width = server_width
        self.server_depth = server_depth
        self.image_shape = image_shape
        self.random_state = random_state

    @property
    def rounds(self):
        return self.epochs

    def fit(self, X, y, eval_set=None):
        train, test, edge, server = self._prepare(X, y, eval_set)
        cfg = self._config(1)
        result = run_centralized(cfg, train, test, edge, server)
        self.model_ = result.model
        self.metrics_ = result.metrics
        return self

    def _model(self):
        return self.model_
