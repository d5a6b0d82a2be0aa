"""scikit-learn style facade over the two training phases."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import LABELS
from .grpo import AlignConfig, train_ua
from .metrics import build_report, predict_records
from .perception import PerceptionConfig, train_dp
from .pipeline import new_policy
from .policy import PolicyConfig
from .validation import check_is_fitted, check_positive, check_samples, check_task


class DisagreementAwareClassifier(ClassifierMixin, BaseEstimator):
    """Binary subjectivity classifier that also reports calibrated confidence.

    ``fit`` runs the supervised phase and, when ``align_steps > 0``, the
    GRPO alignment phase. ``predict_proba`` returns the model's class
    distribution with columns ordered as ``classes_`` (``["pos", "neg"]``).

    Parameters mirror the training configs; see ``PerceptionConfig`` and
    ``AlignConfig`` for their meaning.
    """

    def __init__(self, task="offense", mode="dpua", uniform_weights=False, epochs=10,
                 learning_rate=1e-3, batch_size=16, tau=0.5, alpha=0.1, eps=0.1,
                 align_steps=0, align_learning_rate=3e-4, group_size=8, prompts_per_step=8,
                 reasoning_on=False, calibration_on=True, d_model=128, n_layers=2, n_heads=4,
                 judge=None, seed=0):
        self.task = task
        self.mode = mode
        self.uniform_weights = uniform_weights
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.tau = tau
        self.alpha = alpha
        self.eps = eps
        self.align_steps = align_steps
        self.align_learning_rate = align_learning_rate
        self.group_size = group_size
        self.prompts_per_step = prompts_per_step
        self.reasoning_on = reasoning_on
        self.calibration_on = calibration_on
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.judge = judge
        self.seed = seed

    def _configs(self):
        check_positive("learning_rate", self.learning_rate)
        check_positive("align_steps", self.align_steps, allow_zero=True)
        pcfg = PolicyConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                            d_ff=4 * self.d_model, seed=self.seed)
        dcfg = PerceptionConfig(tau=self.tau, alpha=self.alpha, eps=self.eps, epochs=self.epochs,
                                learning_rate=self.learning_rate, batch_size=self.batch_size,
                                mode=self.mode, uniform_weights=self.uniform_weights, seed=self.seed)
        acfg = AlignConfig(group_size=self.group_size, prompts_per_step=self.prompts_per_step,
                           learning_rate=self.align_learning_rate, max_steps=self.align_steps,
                           epochs=max(1, self.align_steps), tau=self.tau, eps=self.eps,
                           reasoning_on=self.reasoning_on, calibration_on=self.calibration_on,
                           reward="accuracy" if self.mode == "sft_plain" else "dpua", seed=self.seed)
        return pcfg, dcfg, acfg

    def fit(self, X, y=None):
        """Train on ``X`` (samples, or texts with ``(n, 2)`` vote counts ``y``)."""
        samples = check_samples(X, y, check_task(self.task), split="train")
        pcfg, dcfg, acfg = self._configs()
        policy = new_policy(samples, pcfg)
        policy, dp_log = train_dp(samples, policy, dcfg)
        ua_log = []
        if self.align_steps:
            policy, ua_log = train_ua(samples, policy, acfg, judge=self.judge)
        self.policy_ = policy
        self.classes_ = np.array(LABELS)
        self.training_log_ = dp_log + ua_log
        return self

    def _records(self, X):
        check_is_fitted(self)
        return predict_records(self.policy_, check_samples(X, None, check_task(self.task)))

    def predict(self, X) -> np.ndarray:
        """Predicted labels; unparsable outputs come back as ``None``."""
        return np.array([r.prediction for r in self._records(X)], dtype=object)

    def predict_proba(self, X) -> np.ndarray:
        return np.array([[r.model.p_pos, r.model.p_neg] for r in self._records(X)])

    def predict_confidence(self, X) -> np.ndarray:
        return np.array([r.confidence for r in self._records(X)])

    def score(self, X, y=None, sample_weight=None) -> float:
        """Accuracy against majority labels (from samples, or from counts ``y``)."""
        samples = check_samples(X, y, check_task(self.task))
        pred = self.predict(samples)
        gold = np.array([s.majority_label for s in samples], dtype=object)
        return float(np.average(pred == gold, weights=sample_weight))

    def evaluate(self, X, y=None, n_bins: int = 10):
        """Full metric report on labelled samples."""
        check_is_fitted(self)
        samples = check_samples(X, y, check_task(self.task))
        records = predict_records(self.policy_, samples)
        unanimous = {s.id for s in samples if s.agreement == 1.0}
        return build_report(records, n_bins=n_bins, unanimous_ids=unanimous)
