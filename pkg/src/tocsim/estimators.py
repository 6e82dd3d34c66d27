"""scikit-learn style wrappers around the two training stages.

``ContrastiveEncoder`` is stage I (label-free, ``fit(X)``), and
``SplitClassifier`` is stage II (``fit(X, y)``), optionally starting from a
fitted encoder::

    enc = ContrastiveEncoder(snr_db=10).fit(X_unlabelled)
    clf = SplitClassifier(encoder=enc, snr_db=10).fit(X_labelled, y)
    clf.predict(X_test)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .autodiff import SgdConfig
from .channel import ChannelConfig, transmit
from .data import AugmentConfig, Dataset, LabelMask
from .loss import InfoNceConfig
from .model import EncoderSpec, SplitModel
from .trainer import TrainConfig, finetune, new_model, pretrain, stream


def _channel(est) -> ChannelConfig:
    return ChannelConfig(est.channel, est.snr_db, est.power)


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Transmitter encoder trained with InfoNCE on received feature pairs.

    ``transform`` returns the power-normalised features before the channel;
    pass ``through_channel=True`` to get one noisy received draw instead.
    """

    def __init__(
        self,
        hidden_dims=(256, 128),
        feature_dim=32,
        channel="AWGN",
        snr_db=10.0,
        power=1.0,
        epochs=30,
        batch_size=128,
        learning_rate=0.1,
        momentum=0.9,
        temperature=0.1,
        jitter_sigma=1.0,
        mask_prob=0.1,
        scale_range=(0.8, 1.2),
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.feature_dim = feature_dim
        self.channel = channel
        self.snr_db = snr_db
        self.power = power
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.temperature = temperature
        self.jitter_sigma = jitter_sigma
        self.mask_prob = mask_prob
        self.scale_range = scale_range
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            pretrain_epochs=self.epochs,
            finetune_epochs=0,
            batch_size=self.batch_size,
            pretrain_sgd=SgdConfig(self.learning_rate, self.momentum),
            infonce=InfoNceConfig(self.temperature),
            channel=_channel(self),
            augment=AugmentConfig(self.jitter_sigma, self.mask_prob, tuple(self.scale_range)),
            hidden_dims=tuple(self.hidden_dims),
            feature_dim=self.feature_dim,
            seed=int(self.random_state),
        )

    def fit(self, X, y=None):
        """``y`` is accepted for pipeline compatibility and never read."""
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ValueError("need at least 2 samples for contrastive negatives")
        cfg = self._train_config()
        model = new_model(X.shape[1], cfg)
        records = pretrain(model, Dataset(X, None, 1), cfg)
        self.theta_ = model.theta_arrays()
        self.loss_curve_ = [r.train_loss for r in records]
        self.n_features_in_ = X.shape[1]
        return self

    def _model(self) -> SplitModel:
        spec = EncoderSpec(self.n_features_in_, tuple(self.hidden_dims), self.feature_dim)
        model = SplitModel(spec, _channel(self), [ad.Tensor(t) for t in self.theta_])
        return model

    def transform(self, X, through_channel=False):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, encoder was fitted with {self.n_features_in_}")
        model = self._model()
        with ad.no_grad():
            z = model.encode(X)
            if through_channel:
                z = transmit(z, model.channel, stream(self.random_state, "transform-channel"))
        return z.data.copy()


class SplitClassifier(ClassifierMixin, BaseEstimator):
    """Encoder, channel and receiver trained jointly with cross-entropy.

    Every mini-batch is one communication round; ``records_`` holds the
    per-round log.  Prediction runs with the channel in the loop.
    """

    def __init__(
        self,
        encoder=None,
        hidden_dims=(256, 128),
        feature_dim=32,
        receiver_hidden_dims=(128,),
        channel="AWGN",
        snr_db=10.0,
        power=1.0,
        epochs=100,
        batch_size=128,
        learning_rate=0.02,
        momentum=0.0,
        max_rounds=None,
        random_state=0,
    ):
        self.encoder = encoder
        self.hidden_dims = hidden_dims
        self.feature_dim = feature_dim
        self.receiver_hidden_dims = receiver_hidden_dims
        self.channel = channel
        self.snr_db = snr_db
        self.power = power
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.max_rounds = max_rounds
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        hidden, feature_dim = tuple(self.hidden_dims), self.feature_dim
        if self.encoder is not None:
            check_is_fitted(self.encoder, "theta_")
            if self.encoder.n_features_in_ != X.shape[1]:
                raise ValueError("encoder was fitted on a different number of features")
            hidden, feature_dim = tuple(self.encoder.hidden_dims), self.encoder.feature_dim
        cfg = TrainConfig(
            pretrain_epochs=0,
            finetune_epochs=self.epochs,
            batch_size=self.batch_size,
            sgd=SgdConfig(self.learning_rate, self.momentum),
            channel=_channel(self),
            hidden_dims=hidden,
            feature_dim=feature_dim,
            receiver_hidden_dims=tuple(self.receiver_hidden_dims),
            max_rounds=self.max_rounds,
            seed=int(self.random_state),
        )
        model = new_model(X.shape[1], cfg)
        if self.encoder is not None:
            for p, t in zip(model.theta, self.encoder.theta_):
                p.data = t.copy()
        ds = Dataset(X, y_idx, len(self.classes_))
        self.records_ = finetune(model, ds, LabelMask(np.ones(len(ds), dtype=bool), 1.0), cfg)
        self.n_rounds_ = self.records_[-1].round
        self.model_ = model
        self.n_features_in_ = X.shape[1]
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        with ad.no_grad():
            return self.model_.forward(X, stream(self.random_state, "predict-channel")).data

    def predict_proba(self, X):
        logits = self._logits(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]
