"""Differentiable downstream tasks: rhythm classifier and R-peak locator.

Both follow the scikit-learn estimator protocol (``fit``/``predict``,
``get_params``) and wrap a small torch network in ``module_``. A frozen task
model never changes its parameters again; codec training relies on this.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import _torch
from ._validation import check_labels, check_signals
from .core import N_CLASSES

CCE_EPS = 1e-7
ENVELOPE_SIGMA = 5.0
PEAK_TOLERANCE = 10


class FrozenModelError(RuntimeError):
    """Raised when something tries to train a frozen task model."""


# -- envelopes and peak metrics ---------------------------------------------


def peak_envelope(peaks: Sequence[int], M: int, sigma: float = ENVELOPE_SIGMA) -> np.ndarray:
    """Gaussian-smeared peak indicator with values in [0, 1]."""
    t = np.arange(M, dtype=np.float64)
    env = np.zeros(M)
    for p in np.asarray(peaks if peaks is not None else [], dtype=np.float64):
        np.maximum(env, np.exp(-0.5 * ((t - p) / sigma) ** 2), out=env)
    return env


def envelopes_for(peaks_list, M: int, sigma: float = ENVELOPE_SIGMA) -> np.ndarray:
    return np.stack([peak_envelope(p, M, sigma) for p in peaks_list])


def extract_peaks(envelope, threshold: float = 0.5, refractory: int = 20) -> list[int]:
    """Local maxima above ``threshold``; within ``refractory`` samples only the highest survives."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    env = np.asarray(envelope, dtype=np.float64)
    if env.size < 1:
        return []
    left = np.concatenate([[-np.inf], env[:-1]])
    right = np.concatenate([env[1:], [-np.inf]])
    cand = np.flatnonzero((env >= threshold) & (env > left) & (env >= right))
    kept: list[int] = []
    for i in cand[np.argsort(-env[cand], kind="stable")]:
        if all(abs(int(i) - k) > refractory for k in kept):
            kept.append(int(i))
    return sorted(kept)


def peak_f1(predicted, truth, tolerance_samples: float = PEAK_TOLERANCE) -> tuple[float, float, float]:
    """Precision, recall and F1 under greedy one-to-one matching within a tolerance."""
    if tolerance_samples < 0:
        raise ValueError("tolerance must be >= 0")
    pred = [int(p) for p in predicted]
    true = [int(t) for t in truth]
    if not pred and not true:
        return 1.0, 1.0, 1.0
    pairs = sorted(
        (abs(p - t), i, j) for i, p in enumerate(pred) for j, t in enumerate(true) if abs(p - t) <= tolerance_samples
    )
    used_p, used_t, matches = set(), set(), 0
    for _, i, j in pairs:
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
            matches += 1
    precision = matches / len(pred) if pred else 0.0
    recall = matches / len(true) if true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def categorical_cross_entropy(proba, labels) -> np.ndarray:
    """Per-row CCE with the log clamped at ``CCE_EPS``."""
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    p = proba[np.arange(len(labels)), labels]
    return -np.log(np.clip(p, CCE_EPS, 1.0))


# -- networks ---------------------------------------------------------------


class ClassifierNet(nn.Module):
    """Strided conv stack, then dilated context convs so the receptive field spans several beats."""

    def __init__(self, channels=(16, 32, 32, 64), kernel_size=9, context_kernel=9, dilations=(1, 2, 4),
                 n_classes=N_CLASSES):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv1d(c_in, c, kernel_size, stride=2, padding=kernel_size // 2), nn.ReLU()]
            c_in = c
        for d in dilations:
            layers += [nn.Conv1d(c_in, c_in, context_kernel, padding=d * (context_kernel // 2), dilation=d),
                       nn.ReLU()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, n_classes)

    def forward(self, x):
        h = self.features(x.unsqueeze(1)).mean(dim=-1)
        return self.head(h)


class PeakNet(nn.Module):
    """Two-scale U-shaped conv net emitting a peak envelope in [0, 1]."""

    def __init__(self, width=16):
        super().__init__()
        w = width
        self.enc = nn.Conv1d(1, w, 7, padding=3)
        self.down1 = nn.Conv1d(w, 2 * w, 5, stride=2, padding=2)
        self.down2 = nn.Conv1d(2 * w, 2 * w, 5, stride=2, padding=2)
        self.mid = nn.Conv1d(2 * w, 2 * w, 5, padding=2)
        self.up2 = nn.Conv1d(4 * w, 2 * w, 5, padding=2)
        self.up1 = nn.Conv1d(3 * w, w, 5, padding=2)
        self.out = nn.Conv1d(w, 1, 5, padding=2)

    def forward(self, x):
        e = F.relu(self.enc(x.unsqueeze(1)))
        d1 = F.relu(self.down1(e))
        d2 = F.relu(self.mid(F.relu(self.down2(d1))))
        u2 = F.relu(self.up2(torch.cat([F.interpolate(d2, scale_factor=2.0), d1], dim=1)))
        u1 = F.relu(self.up1(torch.cat([F.interpolate(u2, scale_factor=2.0), e], dim=1)))
        return torch.sigmoid(self.out(u1)).squeeze(1)


# -- estimators -------------------------------------------------------------


class _TaskModel(BaseEstimator):
    task_id: str
    loss_kind: str

    def __init__(self, M=1024, epochs=15, batch_size=32, learning_rate=1e-3, lr_decay=1e-5, seed=0):
        self.M = M
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.seed = seed

    # subclasses build their network here
    def _build(self) -> nn.Module:
        raise NotImplementedError

    def _init_module(self):
        _torch.seed_everything(self.seed)
        self.module_ = self._build()
        self.frozen_ = False
        return self.module_

    def _train(self, X, target, loss_fn):
        if getattr(self, "frozen_", False):
            raise FrozenModelError(f"{self.task_id} model is frozen")
        module = self._init_module()
        cfg = _torch.OptimConfig(self.learning_rate, lr_decay=self.lr_decay, batch_size=self.batch_size)
        opt, sched = _torch.make_optimizer(module.parameters(), cfg)
        rng = np.random.default_rng(self.seed)
        Xt = _torch.as_tensor(X)
        self.loss_curve_ = []
        module.train()
        for _ in range(self.epochs):
            total = 0.0
            for idx in _torch.batches(len(Xt), self.batch_size, rng):
                opt.zero_grad()
                loss = loss_fn(module(Xt[idx]), target[idx])
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"{self.task_id}: non-finite training loss")
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(Xt))
        module.eval()
        return self

    def freeze(self):
        check_is_fitted(self, "module_")
        for p in self.module_.parameters():
            p.requires_grad_(False)
        self.module_.eval()
        self.frozen_ = True
        return self

    def checksum(self) -> str:
        check_is_fitted(self, "module_")
        return _torch.checksum(self.module_.state_dict().items())

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.module_.parameters())

    def _forward(self, X):
        check_is_fitted(self, "module_")
        X = check_signals(X, self.M)
        with torch.no_grad():
            return self.module_(_torch.as_tensor(X, _torch.module_dtype(self.module_))).numpy().astype(np.float64)

    def save(self, path):
        check_is_fitted(self, "module_")
        _torch.save_archive(path, self.task_id, self.get_params(), self.module_.state_dict(), {"frozen": self.frozen_})

    @classmethod
    def load(cls, path):
        params, state, extra = _torch.load_archive(path, cls.task_id)
        model = cls(**params)
        model._init_module().load_state_dict(state)
        model.module_.eval()
        if extra.get("frozen"):
            model.freeze()
        return model


class ArrhythmiaClassifier(ClassifierMixin, _TaskModel):
    """Four-class rhythm classifier: strided conv stages, global pooling, softmax."""

    task_id = "hr_classify"
    loss_kind = "categorical-cross-entropy"

    def __init__(self, M=1024, channels=(16, 32, 32, 64), kernel_size=9, epochs=30, batch_size=32,
                 learning_rate=1e-3, lr_decay=1e-5, seed=0):
        super().__init__(M, epochs, batch_size, learning_rate, lr_decay, seed)
        self.channels = channels
        self.kernel_size = kernel_size

    def _build(self):
        return ClassifierNet(tuple(self.channels), self.kernel_size)

    def fit(self, X, y):
        X = check_signals(X, self.M)
        y = check_labels(y, len(X))
        self.classes_ = np.arange(N_CLASSES)
        return self._train(X, torch.as_tensor(y), F.cross_entropy)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "module_")
        X = check_signals(X, self.M)
        with torch.no_grad():
            logits = self.module_(_torch.as_tensor(X, _torch.module_dtype(self.module_)))
            return torch.softmax(logits.double(), dim=-1).numpy()

    classify = predict_proba

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def loss_per_segment(self, X, y) -> np.ndarray:
        return categorical_cross_entropy(self.predict_proba(X), check_labels(y, len(X)))

    def torch_loss(self, x_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Differentiable per-segment CCE used as a training signal."""
        return F.cross_entropy(self.module_(x_hat), y, reduction="none")


class PeakLocator(RegressorMixin, _TaskModel):
    """R-peak envelope regressor; ``predict`` returns envelopes in [0, 1]."""

    task_id = "rr_peaks"
    loss_kind = "mean-squared-error-on-peak-envelope"

    def __init__(self, M=1024, width=16, sigma_env=ENVELOPE_SIGMA, epochs=15, batch_size=32,
                 learning_rate=1e-3, lr_decay=1e-5, seed=0):
        super().__init__(M, epochs, batch_size, learning_rate, lr_decay, seed)
        self.width = width
        self.sigma_env = sigma_env

    def _build(self):
        return PeakNet(self.width)

    def fit(self, X, envelopes):
        X = check_signals(X, self.M)
        env = check_signals(envelopes, self.M)
        if len(env) != len(X):
            raise ValueError("X and envelopes differ in length")
        return self._train(X, _torch.as_tensor(env), F.mse_loss)

    def predict(self, X) -> np.ndarray:
        return self._forward(X)

    def predict_peaks(self, X, threshold: float = 0.5) -> list:
        return [extract_peaks(e, threshold) for e in self.predict(X)]

    def loss_per_segment(self, X, envelopes) -> np.ndarray:
        env = check_signals(envelopes, self.M)
        return ((self.predict(X) - env) ** 2).mean(axis=1)

    def torch_loss(self, x_hat: torch.Tensor, envelopes: torch.Tensor) -> torch.Tensor:
        return ((self.module_(x_hat) - envelopes) ** 2).mean(dim=-1)

    def score(self, X, envelopes, sample_weight=None):
        return -float(self.loss_per_segment(X, envelopes).mean())


TASK_MODELS = {cls.task_id: cls for cls in (ArrhythmiaClassifier, PeakLocator)}


def classify(model: ArrhythmiaClassifier, samples) -> np.ndarray:
    """Class probabilities for one segment or a batch."""
    single = np.ndim(samples) == 1
    proba = model.predict_proba(np.atleast_2d(samples))
    return proba[0] if single else proba


def task_loss(task, reconstructed, ground_truth) -> np.ndarray | float:
    """Loss of ``task`` on reconstructed samples against the matching ground truth.

    Class labels for the classifier, peak envelopes for the peak locator.
    """
    if ground_truth is None:
        raise ValueError(f"missing ground truth for task {task.task_id}")
    single = np.ndim(reconstructed) == 1
    X = np.atleast_2d(reconstructed)
    gt = np.atleast_1d(ground_truth) if task.task_id == "hr_classify" else np.atleast_2d(ground_truth)
    out = task.loss_per_segment(X, gt)
    return float(out[0]) if single else out

