"""Trial training: subsampling, LR range test, Adadelta, context batching,
EMA-smoothed early stopping."""

import copy
import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.nn import functional as F

from .models import ModelConfig, N_CONTEXTS, VelocityModel, latent_length, round_half_up
from .rotograd import TaskRotations
from .seeding import stream, stream_seed
from .separation import NoteFeatures

VELOCITY_SCALE = 127.0
SPLIT_NAMES = ("train", "validation", "test")


class StrategyKind(str, Enum):
    """The four training strategies compared by the experiment."""

    SINGLE_WITHOUT = "single-without"
    MULTIPLE_WITHOUT = "multiple-without"
    SINGLE_WITH = "single-with"
    MULTIPLE_WITH = "multiple-with"

    @property
    def n_performers(self) -> int:
        return N_CONTEXTS if self.value.startswith("multiple") else 1

    @property
    def with_classifier(self) -> bool:
        return self.value.endswith("-with")


STRATEGY_ORDER = (StrategyKind.SINGLE_WITHOUT, StrategyKind.MULTIPLE_WITHOUT,
                  StrategyKind.SINGLE_WITH, StrategyKind.MULTIPLE_WITH)


@dataclass(frozen=True)
class TrainPlan:
    """Knobs of one training run; defaults follow the reference protocol."""

    subsample_fraction: float = 0.001
    batch_size: int = 10
    max_epochs: int = 40
    patience: int = 20
    ema_window: int = 15
    seed: int = 0
    rotation_lr: float = 0.1

    def __post_init__(self):
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must be in (0, 1]")
        for name in ("batch_size", "max_epochs", "patience", "ema_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.rotation_lr <= 0:
            raise ValueError("rotation_lr must be positive")


def subsample(dataset: Mapping[str, Sequence[NoteFeatures]], fraction: float,
              seed: int) -> Dict[str, List[NoteFeatures]]:
    """Uniform subsample without replacement, per (context, split).

    Counts are rounded to the nearest integer; a (context, split) group
    that would come out empty raises instead.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    out: Dict[str, List[NoteFeatures]] = {}
    for split, notes in dataset.items():
        by_context: Dict[int, List[int]] = {}
        for i, note in enumerate(notes):
            by_context.setdefault(note.preset_id, []).append(i)
        kept: List[int] = []
        for context in sorted(by_context):
            idx = by_context[context]
            n_keep = round_half_up(fraction * len(idx))
            if n_keep == 0:
                raise ValueError(
                    f"subsampling leaves no notes for context {context} "
                    f"in split {split!r}")
            rng = stream(seed, "subsample", split, context)
            chosen = rng.choice(len(idx), size=n_keep, replace=False)
            kept.extend(idx[j] for j in sorted(chosen))
        out[split] = [notes[i] for i in sorted(kept)]
    return out


def ema(series: Sequence[float], window: int = 15) -> float:
    """Final exponential moving average with alpha = 2 / (window + 1)."""
    if len(series) == 0:
        raise ValueError("empty series")
    alpha = 2.0 / (window + 1)
    smoothed = float(series[0])
    for value in series[1:]:
        smoothed = alpha * float(value) + (1.0 - alpha) * smoothed
    return smoothed


def ema_series(series: Sequence[float], window: int) -> List[float]:
    """All intermediate EMA values of `series`."""
    if len(series) == 0:
        raise ValueError("empty series")
    alpha = 2.0 / (window + 1)
    out = [float(series[0])]
    for value in series[1:]:
        out.append(alpha * float(value) + (1.0 - alpha) * out[-1])
    return out


def find_lr(step_fn: Callable[[float], float], n_steps: int = 100,
            lr_min: float = 1e-7, lr_max: float = 1.0,
            smooth_window: int = 5, divergence_factor: float = 4.0,
            fallback: float = 1e-5) -> float:
    """Exponential LR range test over a throwaway training step.

    `step_fn(lr)` performs one mini training step at that rate and
    returns its loss. The sweep stops at the first non-finite loss or
    once the smoothed loss exceeds `divergence_factor` times its
    running minimum; the returned rate sits at the steepest smoothed
    descent. Sweeps that diverge immediately or never descend fall
    back to `fallback`.
    """
    lrs = np.geomspace(lr_min, lr_max, n_steps)
    losses: List[float] = []
    for lr in lrs:
        loss = float(step_fn(float(lr)))
        if not math.isfinite(loss):
            break
        losses.append(loss)
    if len(losses) < 2:
        return fallback
    smoothed = ema_series(losses, smooth_window)
    cut = len(smoothed)
    running_min = smoothed[0]
    for i, value in enumerate(smoothed):
        running_min = min(running_min, value)
        if value > divergence_factor * running_min:
            cut = i
            break
    segment = smoothed[:cut]
    if len(segment) < 2:
        return fallback
    diffs = np.diff(segment)
    best = int(np.argmin(diffs))
    threshold = -1e-10 * max(1.0, abs(segment[0]))
    if diffs[best] >= threshold:
        return fallback
    return float(lrs[best + 1])


@dataclass
class AdadeltaState:
    """Per-parameter squared-gradient and squared-update accumulators."""

    square_avg: List[torch.Tensor]
    acc_delta: List[torch.Tensor]


def adadelta_init(params: Sequence[torch.Tensor]) -> AdadeltaState:
    """Zeroed accumulators matching `params`."""
    return AdadeltaState(
        square_avg=[torch.zeros_like(p, requires_grad=False) for p in params],
        acc_delta=[torch.zeros_like(p, requires_grad=False) for p in params])


def adadelta_step(params: Sequence[torch.Tensor],
                  grads: Sequence[Optional[torch.Tensor]],
                  state: AdadeltaState, lr: float = 1.0,
                  rho: float = 0.9, eps: float = 1e-6) -> None:
    """One in-place Adadelta update; skips parameters without a gradient."""
    with torch.no_grad():
        for p, g, sq, acc in zip(params, grads, state.square_avg,
                                 state.acc_delta):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise ValueError("non-finite gradient in Adadelta step")
            sq.mul_(rho).addcmul_(g, g, value=1.0 - rho)
            delta = g * torch.sqrt(acc + eps) / torch.sqrt(sq + eps)
            acc.mul_(rho).addcmul_(delta, delta, value=1.0 - rho)
            p.sub_(lr * delta)


def make_context_batches(notes: Sequence[NoteFeatures], batch_size: int,
                         seed: int) -> List[List[int]]:
    """Context-pure batches of equal size, cycling across contexts.

    Every context contributes the same number of batches per epoch (the
    maximum needed to cover the largest context); smaller contexts
    recycle their notes through reshuffles. Batch order cycles the
    contexts in ascending id order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if len(notes) == 0:
        raise ValueError("empty dataset")
    by_context: Dict[int, List[int]] = {}
    for i, note in enumerate(notes):
        by_context.setdefault(note.preset_id, []).append(i)
    contexts = sorted(by_context)
    rounds = max(-(-len(g) // batch_size) for g in by_context.values())
    rngs = {c: stream(seed, "batches", c) for c in contexts}
    pools = {c: [by_context[c][j] for j in rngs[c].permutation(len(by_context[c]))]
             for c in contexts}
    cursor = {c: 0 for c in contexts}
    batches: List[List[int]] = []
    for _ in range(rounds):
        for c in contexts:
            batch: List[int] = []
            while len(batch) < batch_size:
                if cursor[c] == len(pools[c]):
                    pool = by_context[c]
                    pools[c] = [pool[j] for j in rngs[c].permutation(len(pool))]
                    cursor[c] = 0
                take = min(batch_size - len(batch), len(pools[c]) - cursor[c])
                batch.extend(pools[c][cursor[c]:cursor[c] + take])
                cursor[c] += take
            batches.append(batch)
    return batches


class EarlyStopper:
    """Patience counter over the EMA-smoothed validation loss."""

    def __init__(self, patience: int = 20, window: int = 15):
        if patience < 1 or window < 1:
            raise ValueError("patience and window must be positive")
        self.patience = patience
        self.alpha = 2.0 / (window + 1)
        self.smoothed: Optional[float] = None
        self.best = math.inf
        self.best_epoch = 0
        self.epochs_since_best = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Feed one validation loss; True when the smoothed loss improved."""
        self.epoch += 1
        if self.smoothed is None:
            self.smoothed = float(value)
        else:
            self.smoothed = self.alpha * float(value) + (1.0 - self.alpha) * self.smoothed
        if self.smoothed < self.best:
            self.best = self.smoothed
            self.best_epoch = self.epoch
            self.epochs_since_best = 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.patience


class TrialModule(torch.nn.Module):
    """Velocity model plus, for the *-with strategies, task rotations."""

    def __init__(self, config: ModelConfig, strategy: StrategyKind):
        super().__init__()
        self.strategy = strategy
        self.net = VelocityModel(config, strategy.n_performers,
                                 strategy.with_classifier)
        self.rotations = (TaskRotations(2, latent_length(config))
                          if strategy.with_classifier else None)

    def forward(self, features: torch.Tensor, contexts: torch.Tensor):
        """Returns (velocity, probs, rotated latents or None)."""
        latent = self.net.encode(features)
        route = contexts if self.strategy.n_performers > 1 else None
        if self.rotations is None:
            return self.net.estimate(latent, route), None, None
        latent_v = self.rotations.apply(0, latent)
        latent_c = self.rotations.apply(1, latent)
        if self.training and latent_v.requires_grad:
            latent_v.retain_grad()
            latent_c.retain_grad()
        velocity = self.net.estimate(latent_v, route)
        probs = self.net.classify(latent_c)
        return velocity, probs, (latent_v, latent_c)


@dataclass
class EpochRecord:
    """Loss bookkeeping of one epoch."""

    epoch: int
    train_loss: float
    val_loss: float
    val_ema: float
    val_velocity_l1: float
    val_classifier_ce: Optional[float]


@dataclass
class TrialOutcome:
    """Everything train_trial produces for one (config, strategy) pair."""

    config: ModelConfig
    strategy: StrategyKind
    plan: TrainPlan
    valid: bool
    reason: str
    learning_rate: float
    epochs_ran: int
    best_epoch: int
    best_val_ema: float
    untrained_test_l1: float
    history: List[EpochRecord]
    state: Optional[Dict[str, torch.Tensor]]


def _to_tensors(notes: Sequence[NoteFeatures]):
    feats = torch.from_numpy(
        np.stack([n.mfcc for n in notes]).astype(np.float32)).unsqueeze(1)
    targets = torch.tensor([n.velocity_target / VELOCITY_SCALE for n in notes],
                           dtype=torch.float32)
    contexts = torch.tensor([n.preset_id for n in notes], dtype=torch.long)
    return feats, targets, contexts


def _batched_eval(module: TrialModule, feats, targets, contexts,
                  chunk: int = 512) -> Tuple[float, Optional[float], float]:
    """(velocity L1, classifier CE or None, classifier accuracy) on a split."""
    module.eval()
    abs_err = 0.0
    ce_sum = 0.0
    hits = 0
    n = len(targets)
    with torch.no_grad():
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            velocity, probs, _ = module(feats[lo:hi], contexts[lo:hi])
            abs_err += float((velocity - targets[lo:hi]).abs().sum())
            if probs is not None:
                logp = torch.log(probs.clamp_min(1e-12))
                ce_sum += float(F.nll_loss(logp, contexts[lo:hi],
                                           reduction="sum"))
                hits += int((probs.argmax(dim=1) == contexts[lo:hi]).sum())
    l1 = abs_err / n
    if module.net.classifier is None:
        return l1, None, 0.0
    return l1, ce_sum / n, hits / n


def _probe_lr(module: TrialModule, feats, targets, contexts,
              batches: List[List[int]], plan: TrainPlan) -> float:
    """Range-test the learning rate on a throwaway copy of the model.

    Steps cycle through the training batches; after each step the loss
    is re-measured on a fixed probe subset so the sweep curve reflects
    the step size rather than batch-to-batch variance.
    """
    probe = copy.deepcopy(module)
    params = list(probe.net.parameters())
    state = adadelta_init(params)
    n_batches = len(batches)
    meas = sorted({j for batch in batches[:6] for j in batch})
    counter = {"i": 0}

    def composite(idx) -> torch.Tensor:
        velocity, probs, _ = probe(feats[idx], contexts[idx])
        loss = F.l1_loss(velocity, targets[idx])
        if probs is not None:
            loss = loss + F.nll_loss(torch.log(probs.clamp_min(1e-12)),
                                     contexts[idx])
        return loss

    def step(lr: float) -> float:
        idx = batches[counter["i"] % n_batches]
        counter["i"] += 1
        probe.train()
        probe.zero_grad(set_to_none=True)
        loss = composite(idx)
        if not math.isfinite(float(loss.detach())):
            return float(loss.detach())
        loss.backward()
        try:
            adadelta_step(params, [p.grad for p in params], state, lr=lr)
        except ValueError:
            return math.inf
        with torch.no_grad():
            return float(composite(meas))

    return find_lr(step)


def train_trial(config: ModelConfig, strategy: StrategyKind, plan: TrainPlan,
                dataset: Mapping[str, Sequence[NoteFeatures]]) -> TrialOutcome:
    """Train one (config, strategy) pair to its best-EMA checkpoint."""
    for split in SPLIT_NAMES:
        if split not in dataset or len(dataset[split]) == 0:
            raise ValueError(f"dataset is missing the {split!r} split")
    data = subsample({s: dataset[s] for s in SPLIT_NAMES},
                     plan.subsample_fraction, plan.seed)

    torch.manual_seed(stream_seed(plan.seed, "init", config.label,
                                  strategy.value))
    module = TrialModule(config, strategy)
    params = list(module.net.parameters())

    tensors = {s: _to_tensors(data[s]) for s in SPLIT_NAMES}
    x_tr, t_tr, c_tr = tensors["train"]

    test_l1, _, _ = _batched_eval(module, *tensors["test"])
    untrained_test_l1 = test_l1 * VELOCITY_SCALE

    probe_batches = make_context_batches(
        data["train"], plan.batch_size, stream_seed(plan.seed, "lr-find"))
    lr = _probe_lr(module, x_tr, t_tr, c_tr, probe_batches, plan)

    state = adadelta_init(params)
    stopper = EarlyStopper(plan.patience, plan.ema_window)
    history: List[EpochRecord] = []
    best_state: Optional[Dict[str, torch.Tensor]] = None
    valid = True
    reason = "ok"
    epochs_ran = 0

    try:
        for epoch in range(1, plan.max_epochs + 1):
            batches = make_context_batches(
                data["train"], plan.batch_size,
                stream_seed(plan.seed, "epoch", epoch))
            module.train()
            batch_losses: List[float] = []
            for idx in batches:
                module.zero_grad(set_to_none=True)
                velocity, probs, rotated = module(x_tr[idx], c_tr[idx])
                loss = F.l1_loss(velocity, t_tr[idx])
                if probs is not None:
                    loss = loss + F.nll_loss(
                        torch.log(probs.clamp_min(1e-12)), c_tr[idx])
                if not torch.isfinite(loss):
                    raise ValueError(f"non-finite training loss at epoch {epoch}")
                loss.backward()
                adadelta_step(params, [p.grad for p in params], state, lr=lr)
                if rotated is not None:
                    module.rotations.update([r.grad for r in rotated],
                                            plan.rotation_lr)
                batch_losses.append(float(loss.detach()))
            epochs_ran = epoch
            val_l1, val_ce, _ = _batched_eval(module, *tensors["validation"])
            val_loss = val_l1 + (val_ce if val_ce is not None else 0.0)
            if not math.isfinite(val_loss):
                raise ValueError(f"non-finite validation loss at epoch {epoch}")
            improved = stopper.update(val_loss)
            history.append(EpochRecord(
                epoch=epoch, train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss, val_ema=stopper.smoothed,
                val_velocity_l1=val_l1, val_classifier_ce=val_ce))
            if improved:
                best_state = {k: v.detach().clone()
                              for k, v in module.state_dict().items()}
            if stopper.should_stop:
                break
    except (ValueError, RuntimeError) as exc:
        valid = False
        reason = str(exc)

    if best_state is None and valid:
        valid = False
        reason = "no finite validation epoch"
    return TrialOutcome(
        config=config, strategy=strategy, plan=plan, valid=valid,
        reason=reason, learning_rate=lr, epochs_ran=epochs_ran,
        best_epoch=stopper.best_epoch,
        best_val_ema=stopper.best if best_state is not None else math.inf,
        untrained_test_l1=untrained_test_l1, history=history,
        state=best_state)


def restore_module(outcome: TrialOutcome) -> TrialModule:
    """Rebuild the trial's module and load its best checkpoint."""
    if outcome.state is None:
        raise ValueError("outcome carries no checkpoint")
    module = TrialModule(outcome.config, outcome.strategy)
    module.load_state_dict(outcome.state)
    module.eval()
    return module


def checkpoint_hash(state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names, dtypes, shapes, and bytes."""
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()
