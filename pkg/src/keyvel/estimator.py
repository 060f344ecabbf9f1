"""Scikit-learn style regressor wrapping the velocity training loop."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .models import ModelConfig
from .seeding import stream
from .separation import N_FRAMES, N_MFCC, NoteFeatures
from .training import (StrategyKind, TrainPlan, VELOCITY_SCALE, _to_tensors,
                       restore_module, train_trial)


class VelocityEstimator(RegressorMixin, BaseEstimator):
    """Predicts MIDI velocity (0..127) from 13x30 MFCC note patches.

    X may be (n, 390) flat or (n, 13, 30); y is velocity in 0..127.
    `context_ids` (0..5) routes notes to per-context performer heads for
    the multiple-performer strategies and feeds the recognition task for
    the *-with strategies.
    """

    def __init__(self, k0_encoder=3, k0_performer=3, k2_encoder=1,
                 k2_performer=1, strategy="single-without",
                 subsample_fraction=1.0, batch_size=10, max_epochs=40,
                 patience=20, ema_window=15, rotation_lr=0.1,
                 validation_fraction=0.1, seed=0):
        self.k0_encoder = k0_encoder
        self.k0_performer = k0_performer
        self.k2_encoder = k2_encoder
        self.k2_performer = k2_performer
        self.strategy = strategy
        self.subsample_fraction = subsample_fraction
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.ema_window = ema_window
        self.rotation_lr = rotation_lr
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _as_notes(self, X, y, context_ids):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2 and X.shape[1] == N_MFCC * N_FRAMES:
            X = X.reshape(len(X), N_MFCC, N_FRAMES)
        if X.ndim != 3 or X.shape[1:] != (N_MFCC, N_FRAMES):
            raise ValueError(
                f"X must be (n, {N_MFCC * N_FRAMES}) or "
                f"(n, {N_MFCC}, {N_FRAMES}), got {X.shape}")
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (len(X),):
            raise ValueError("y must be one velocity per row of X")
        if context_ids is None:
            context_ids = np.zeros(len(X), dtype=int)
        context_ids = np.asarray(context_ids, dtype=int)
        if context_ids.shape != (len(X),):
            raise ValueError("context_ids must be one id per row of X")
        return [
            NoteFeatures(mfcc=X[i], note_id=str(i),
                         preset_id=int(context_ids[i]),
                         velocity_target=float(y[i]))
            for i in range(len(X))]

    def fit(self, X, y, context_ids=None):
        """Train on MFCC patches; returns self."""
        notes = self._as_notes(X, y, context_ids)
        n = len(notes)
        if n < 2:
            raise ValueError("need at least 2 samples to fit")
        rng = stream(self.seed, "estimator-split")
        order = rng.permutation(n)
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n_val >= n:
            n_val = n - 1
        val_idx = set(order[:n_val].tolist())
        train = [notes[i] for i in range(n) if i not in val_idx]
        val = [notes[i] for i in range(n) if i in val_idx]
        dataset = {"train": train, "validation": val, "test": val}
        config = ModelConfig(
            k0_encoder=self.k0_encoder, k0_performer=self.k0_performer,
            k2_encoder=self.k2_encoder, k2_performer=self.k2_performer)
        plan = TrainPlan(
            subsample_fraction=self.subsample_fraction,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, ema_window=self.ema_window,
            seed=self.seed, rotation_lr=self.rotation_lr)
        outcome = train_trial(config, StrategyKind(self.strategy), plan,
                              dataset)
        if not outcome.valid:
            raise RuntimeError(f"training failed: {outcome.reason}")
        self.outcome_ = outcome
        self.module_ = restore_module(outcome)
        self.n_features_in_ = N_MFCC * N_FRAMES
        return self

    def predict(self, X, context_ids=None):
        """Predicted velocities in 0..127, one per row of X."""
        check_is_fitted(self, "module_")
        notes = self._as_notes(X, np.ones(len(np.asarray(X))), context_ids)
        feats, _, contexts = _to_tensors(notes)
        import torch
        self.module_.eval()
        with torch.no_grad():
            vel, _, _ = self.module_(feats, contexts)
        return (vel.double().numpy() * VELOCITY_SCALE)

    def score(self, X, y, context_ids=None):
        """Negative mean absolute error in velocity units."""
        pred = self.predict(X, context_ids=context_ids)
        return -float(np.mean(np.abs(pred - np.asarray(y, dtype=np.float64))))
