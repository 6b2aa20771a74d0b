"""scikit-learn compatible wrappers around the early-exit model.

``EarlyExitClassifier`` trains centrally; ``FederatedEarlyExitClassifier``
treats ``groups`` as client ids and trains by federated rounds. Both predict
from the deepest exit by default and expose every exit through ``exit=``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .aggregation import ServerOptimizerConfig
from .client import LocalTrainConfig, evaluate, sgd_epochs
from .data import Corpus
from .harness import DataConfig, ExperimentConfig, run_experiment
from .heterogeneity import STREAM_PRETRAIN, make_rng
from .model import Batch, ModelConfig, SubNetSpec, forward, init_model
from .losses import log_softmax


class EarlyExitClassifier(ClassifierMixin, BaseEstimator):
    """Dense early-exit classifier trained on the summed per-exit cross-entropy."""

    def __init__(self, hidden_dim=16, num_blocks=6, exit_every=2, frontend_blocks=1,
                 activation="tanh", epochs=30, lr=0.05, batch_size=16, exit_mask=None,
                 random_state=0):
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.exit_every = exit_every
        self.frontend_blocks = frontend_blocks
        self.activation = activation
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.exit_mask = exit_mask
        self.random_state = random_state

    def _model_config(self, n_features, n_classes):
        return ModelConfig(input_dim=n_features, hidden_dim=self.hidden_dim, num_blocks=self.num_blocks,
                           exit_every=self.exit_every, output_dim=max(n_classes, 2),
                           frontend_blocks=self.frontend_blocks, activation=self.activation,
                           seed=int(self.random_state or 0))

    def _encode(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        self.model_config_ = self._model_config(X.shape[1], len(self.classes_))
        return X, self.label_encoder_.transform(y)

    def fit(self, X, y):
        X, y_enc = self._encode(X, y)
        params = init_model(self.model_config_)
        train_cfg = LocalTrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                                     exit_mask=self.exit_mask)
        self.params_, self.loss_curve_ = sgd_epochs(
            params, self.model_config_, Batch(X, y_enc), SubNetSpec(self.model_config_.num_exits),
            train_cfg, make_rng(int(self.random_state or 0), STREAM_PRETRAIN))
        return self

    @property
    def n_exits_(self):
        check_is_fitted(self, "params_")
        return self.model_config_.num_exits

    def _exit_logits(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        dummy = np.zeros(len(X), dtype=np.int64)
        return [lg[:, 0, :len(self.classes_)] for lg in forward(self.params_, self.model_config_, Batch(X, dummy))]

    def _pick(self, X, exit):
        logits = self._exit_logits(X)
        index = len(logits) if exit is None else exit
        if not 1 <= index <= len(logits):
            raise ValueError(f"exit must lie in [1, {len(logits)}]")
        return logits[index - 1]

    def decision_function(self, X, exit=None):
        """Exit logits; for two classes the margin of ``classes_[1]`` over ``classes_[0]``."""
        logits = self._pick(X, exit)
        return logits[:, 1] - logits[:, 0] if len(self.classes_) == 2 else logits

    def predict_proba(self, X, exit=None):
        return np.exp(log_softmax(self._pick(X, exit)))

    def predict(self, X, exit=None):
        logits = self._pick(X, exit)
        return self.classes_[np.argmax(logits, axis=1)]

    def predict_exits(self, X):
        """Predictions of every exit, shape (n_exits, n_samples)."""
        logits = self._exit_logits(X)
        return np.stack([self.classes_[np.argmax(lg, axis=1)] for lg in logits])

    def score_exits(self, X, y):
        """Accuracy at each exit."""
        y = np.asarray(y)
        return [float(np.mean(pred == y)) for pred in self.predict_exits(X)]

    def exit_metrics(self, X, y):
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64)
        return evaluate(self.params_, self.model_config_, Batch(X, self.label_encoder_.transform(y)))


class FederatedEarlyExitClassifier(EarlyExitClassifier):
    """Federated training over clients given by ``groups``.

    Each distinct value in ``groups`` becomes one client shard. ``profile`` is
    a builtin profile name or a probability vector over sub-net sizes. With
    ``warm_start=True`` a previous fit (central or federated) is the starting
    model; otherwise the model is freshly initialized.
    """

    def __init__(self, hidden_dim=16, num_blocks=6, exit_every=2, frontend_blocks=1,
                 activation="tanh", rounds=50, fraction=0.1, profile="uniform", server="fedadam",
                 server_lr=None, local_epochs=5, lr=0.01, batch_size=8, freeze_frontend=True,
                 exit_mask=None, eval_every=5, warm_start=False, random_state=0):
        super().__init__(hidden_dim=hidden_dim, num_blocks=num_blocks, exit_every=exit_every,
                         frontend_blocks=frontend_blocks, activation=activation, lr=lr,
                         batch_size=batch_size, exit_mask=exit_mask, random_state=random_state)
        self.rounds = rounds
        self.fraction = fraction
        self.profile = profile
        self.server = server
        self.server_lr = server_lr
        self.local_epochs = local_epochs
        self.freeze_frontend = freeze_frontend
        self.eval_every = eval_every
        self.warm_start = warm_start

    def fit(self, X, y, groups=None, X_val=None, y_val=None):
        if groups is None:
            raise ValueError("groups (client id per sample) is required for federated fitting")
        previous = getattr(self, "params_", None) if self.warm_start else None
        X, y_enc = self._encode(X, y)
        groups = np.asarray(groups)
        if len(groups) != len(X):
            raise ValueError("groups must have one entry per sample")
        clients = np.unique(groups)
        shards = [Batch(X[groups == g], y_enc[groups == g]) for g in clients]
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            eval_set = Batch(X_val, self.label_encoder_.transform(y_val))
        else:
            eval_set = Batch(X, y_enc)
        corpus = Corpus(shards, eval_set, "classification", len(self.classes_))
        seed = int(self.random_state or 0)
        cfg = ExperimentConfig(
            model=self.model_config_, data=DataConfig(), num_clients=len(clients), fraction=self.fraction,
            profile=self.profile, server=ServerOptimizerConfig(self.server, self.server_lr),
            local=LocalTrainConfig(epochs=self.local_epochs, lr=self.lr, batch_size=self.batch_size,
                                   freeze_frontend=self.freeze_frontend, exit_mask=self.exit_mask),
            rounds=self.rounds, eval_every=self.eval_every, seed=seed, record_wallclock=False)
        start = init_model(cfg.model_config())
        if previous is not None and previous.config.fingerprint() == start.config.fingerprint():
            start = previous
        result = run_experiment(cfg, start_params=start, corpus=corpus)
        self.params_ = result.final_params
        self.history_ = result.metrics
        self.clients_ = clients
        return self
