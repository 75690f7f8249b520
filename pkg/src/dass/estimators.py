"""scikit-learn style wrappers: fbank transformer and spectrogram classifiers."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .distill import DistillConfig, TeacherHandle, predict_logits, train
from .features import FbankConfig, fbank, log_mel
from .models.attention import AttentionClassifier as AttentionNet, attn_preset
from .models.dass import DASS, preset


def check_spectrograms(X, allow_ragged: bool = False):
    """``(clips, frames, mels)`` finite float array, or a list of ``(frames, mels)`` when ragged."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X.astype(np.float32, copy=False)
        if X.shape[0] == 0 or X.shape[1] == 0 or X.shape[2] == 0:
            raise ValueError(f"empty spectrogram batch of shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("spectrograms contain NaN or inf")
        return X
    if not allow_ragged:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3:
            raise ValueError(f"expected (clips, frames, mels), got shape {X.shape}")
        return check_spectrograms(X)
    items = [np.asarray(x, dtype=np.float32) for x in X]
    if not items:
        raise ValueError("no spectrograms given")
    mels = {x.shape[-1] for x in items}
    if any(x.ndim != 2 or x.size == 0 for x in items) or len(mels) != 1:
        raise ValueError("each spectrogram must be a nonempty (frames, mels) array with a common mel count")
    if not all(np.all(np.isfinite(x)) for x in items):
        raise ValueError("spectrograms contain NaN or inf")
    return items


def check_multilabel(y, n_samples: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"labels must be a (clips, classes) multi-hot matrix, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if n_samples is not None and len(y) != n_samples:
        raise ValueError(f"{len(y)} label rows for {n_samples} clips")
    return y.astype(np.float32)


class FbankTransformer(TransformerMixin, BaseEstimator):
    """Waveforms to normalized log-mel spectrograms.

    ``fit`` estimates the global mean and standard deviation of the log-mel
    values of the given waveforms.
    """

    def __init__(self, sample_rate=16000, window_ms=25.0, hop_ms=10.0, mel_bins=128, f_min=20.0,
                 f_max=None, log_floor=1e-10):
        self.sample_rate = sample_rate
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.mel_bins = mel_bins
        self.f_min = f_min
        self.f_max = f_max
        self.log_floor = log_floor

    def _base_config(self) -> FbankConfig:
        return FbankConfig(sample_rate=self.sample_rate, window_ms=self.window_ms, hop_ms=self.hop_ms,
                           mel_bins=self.mel_bins, f_min=self.f_min, f_max=self.f_max,
                           log_floor=self.log_floor)

    @staticmethod
    def _waveforms(X):
        waves = [np.asarray(x, dtype=np.float64) for x in X]
        if not waves or any(w.ndim != 1 or w.size == 0 for w in waves):
            raise ValueError("expected a nonempty sequence of nonempty 1-D waveforms")
        return waves

    def fit(self, X, y=None):
        cfg = self._base_config()
        logs = np.concatenate([log_mel(w, cfg).ravel() for w in self._waveforms(X)])
        std = float(logs.std())
        self.config_ = cfg.with_stats(float(logs.mean()), std if std > 0 else 1.0)
        self.n_features_out_ = cfg.mel_bins
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        feats = [fbank(w, self.config_) for w in self._waveforms(X)]
        if len({f.shape for f in feats}) == 1:
            return np.stack(feats)
        return feats


class _SpectrogramClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict logic; subclasses build the torch module."""

    def _build(self, num_classes: int) -> torch.nn.Module:
        raise NotImplementedError

    def _train_config(self) -> DistillConfig:
        return DistillConfig(lr=self.lr, batch_size=self.batch_size, schedule=self.schedule,
                             epochs=self.epochs, distill_loss=self.distill_loss, seed=self.random_state)

    def fit(self, X, y, teacher=None, eval_set=None, log_path=None):
        """Train on spectrograms ``X`` and multi-hot labels ``y``.

        ``teacher`` may be a fitted classifier, a list of them (averaged), or a
        :class:`~dass.distill.TeacherHandle`.
        """
        X = check_spectrograms(X)
        y = check_multilabel(y, len(X))
        if teacher is not None and not isinstance(teacher, TeacherHandle):
            teacher = TeacherHandle(list(teacher) if isinstance(teacher, (list, tuple)) else [teacher])
        torch.manual_seed(self.random_state)
        model = self._build(y.shape[1])
        if self.dtype == "float64":
            model = model.double()
        result = train(model, X, y, self._train_config(), teacher=teacher, eval_set=eval_set,
                       log_path=log_path)
        self.model_ = result.model
        self.history_ = result.history
        self.optimizer_ = result.optimizer
        self.classes_ = np.arange(y.shape[1])
        self.n_mels_ = X.shape[2]
        return self

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        X = check_spectrograms(X, allow_ragged=True)
        mels = X.shape[2] if isinstance(X, np.ndarray) else X[0].shape[1]
        if mels != self.n_mels_:
            raise ValueError(f"fitted on {self.n_mels_} mel bins, got {mels}")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check_input(X)
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(int)

    def score(self, X, y, sample_weight=None) -> float:
        """Mean average precision."""
        from .metrics import mean_average_precision
        return mean_average_precision(self.decision_function(X), check_multilabel(y))[0]


class DASSClassifier(_SpectrogramClassifier):
    def __init__(self, preset="tiny", pooling=None, lr=1e-3, batch_size=16, schedule="constant",
                 epochs=4, distill_loss="kl", random_state=0, threshold=0.5, dtype="float32",
                 model_overrides=None):
        self.preset = preset
        self.pooling = pooling
        self.lr = lr
        self.batch_size = batch_size
        self.schedule = schedule
        self.epochs = epochs
        self.distill_loss = distill_loss
        self.random_state = random_state
        self.threshold = threshold
        self.dtype = dtype
        self.model_overrides = model_overrides

    def _build(self, num_classes):
        over = dict(self.model_overrides or {})
        over["num_classes"] = num_classes
        if self.pooling is not None:
            over["pooling"] = self.pooling
        return DASS(preset(self.preset, **over))


class AttentionClassifier(_SpectrogramClassifier):
    def __init__(self, preset="tiny", pooling="mean", lr=1e-3, batch_size=16, schedule="constant",
                 epochs=4, distill_loss="kl", random_state=0, threshold=0.5, dtype="float32",
                 model_overrides=None):
        self.preset = preset
        self.pooling = pooling
        self.lr = lr
        self.batch_size = batch_size
        self.schedule = schedule
        self.epochs = epochs
        self.distill_loss = distill_loss
        self.random_state = random_state
        self.threshold = threshold
        self.dtype = dtype
        self.model_overrides = model_overrides

    def _build(self, num_classes):
        over = dict(self.model_overrides or {})
        return AttentionNet(attn_preset(self.preset, num_classes=num_classes, pooling=self.pooling, **over))
