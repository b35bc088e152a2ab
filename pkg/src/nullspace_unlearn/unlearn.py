"""Unlearning runs: null-space calibrated fine-tuning plus the ablation baselines.

The full method relabels every forget-set sample with the original model's
best prediction outside the unlearn classes, then fine-tunes with each
gradient block projected onto the null space of the remaining classes'
activation subspaces.  Baselines swap the labeling rule (random labels,
kept labels with gradient ascent) and/or drop the projection, which is
exactly the ablation grid the evaluation suite compares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .determinism import PortableRng, derive_seed
from .linalg import NumericError, apply_projection
from .subspace import ProjectorCache

_LABELINGS = ("pseudo", "random", "keep")


@dataclass(frozen=True)
class UnlearnPlan:
    """What to forget and how: labeling rule, projection switch, ascent switch, SGD knobs."""

    unlearn_classes: tuple
    labeling: str = "pseudo"
    use_null_space: bool = True
    ascend: bool = False
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "unlearn_classes", tuple(sorted(int(c) for c in self.unlearn_classes))
        )
        if not self.unlearn_classes:
            raise ValueError("plan needs at least one unlearn class")
        if self.labeling not in _LABELINGS:
            raise ValueError(f"unknown labeling {self.labeling!r}; expected one of {_LABELINGS}")
        if self.ascend and self.labeling != "keep":
            raise ValueError("gradient ascent only makes sense on the kept labels")
        if self.lr < 0.0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def describe(self) -> str:
        parts = [self.labeling]
        if self.ascend:
            parts.append("ascend")
        if self.use_null_space:
            parts.append("nullspace")
        return "+".join(parts)


@dataclass
class PseudoLabeledSet:
    """Forget-set samples with original labels and their assigned training labels."""

    features: np.ndarray
    original_labels: np.ndarray
    assigned_labels: np.ndarray
    labeling: str

    def __post_init__(self):
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64).reshape(-1)
        self.assigned_labels = np.asarray(self.assigned_labels, dtype=np.int64).reshape(-1)
        if self.original_labels.size != self.assigned_labels.size:
            raise ValueError("label arrays disagree on length")
        if self.labeling in ("pseudo", "random") and (
            self.assigned_labels == self.original_labels
        ).any():
            raise ValueError(f"{self.labeling} labeling assigned a sample its original label")


@dataclass
class UnlearnResult:
    """An unlearned network plus the run record the manifest serializes."""

    network: nn.Network
    plan: UnlearnPlan
    epoch_losses: list
    labeled: PseudoLabeledSet


def pseudo_label(net_o: nn.Network, x, y: int, unlearn_classes) -> int:
    """Original model's most probable class outside the unlearn set (lowest index on ties)."""
    classes = sorted(int(c) for c in unlearn_classes)
    y = int(y)
    if y not in classes:
        raise ValueError(f"sample label {y} is not an unlearn class {classes}")
    k = net_o.n_classes
    if set(classes) >= set(range(k)):
        raise ValueError("unlearn classes cover every class; no pseudo-label target remains")
    probs = nn.predict_proba(net_o, np.asarray(x, dtype=np.float64).reshape(1, -1))[:, 0]
    masked = probs.copy()
    masked[classes] = -np.inf
    return int(np.argmax(masked))


def pseudo_label_set(net_o: nn.Network, d_u, unlearn_classes) -> PseudoLabeledSet:
    """Vectorized pseudo_label over a forget set."""
    classes = sorted(int(c) for c in unlearn_classes)
    k = net_o.n_classes
    if set(classes) >= set(range(k)):
        raise ValueError("unlearn classes cover every class; no pseudo-label target remains")
    labels = np.asarray(d_u.labels, dtype=np.int64).reshape(-1)
    outside = ~np.isin(labels, classes)
    if outside.any():
        raise ValueError(
            f"forget set contains label {labels[outside][0]} outside the unlearn classes {classes}"
        )
    probs = nn.predict_proba(net_o, d_u.features)
    masked = probs.copy()
    masked[classes, :] = -np.inf
    assigned = np.argmax(masked, axis=0).astype(np.int64)
    return PseudoLabeledSet(
        features=np.asarray(d_u.features, dtype=np.float64),
        original_labels=labels,
        assigned_labels=assigned,
        labeling="pseudo",
    )


def random_label_set(d_u, n_classes: int, unlearn_classes, seed: int) -> PseudoLabeledSet:
    """Uniform random label != original per sample, drawn once, seeded."""
    labels = np.asarray(d_u.labels, dtype=np.int64).reshape(-1)
    if n_classes < 2:
        raise ValueError("random relabeling needs at least two classes")
    rng = PortableRng(derive_seed(seed, "random-labels"))
    draws = rng.integers_below(np.full(labels.size, n_classes - 1, dtype=np.uint64)).astype(np.int64)
    assigned = np.where(draws >= labels, draws + 1, draws)
    return PseudoLabeledSet(
        features=np.asarray(d_u.features, dtype=np.float64),
        original_labels=labels,
        assigned_labels=assigned,
        labeling="random",
    )


def _finetune(
    net: nn.Network,
    labeled: PseudoLabeledSet,
    cache: ProjectorCache | None,
    plan: UnlearnPlan,
) -> UnlearnResult:
    """Shared SGD engine: mini-batches grouped by original class, optional projection/ascent.

    Grouping by original class is what lets each batch use the projector that
    excludes exactly that class.  Classes iterate in sorted order and each
    group is reshuffled per epoch from one seeded stream, so runs are
    bit-reproducible.
    """
    out = net.copy()
    feats = labeled.features
    y_train = labeled.assigned_labels
    y_orig = labeled.original_labels
    groups = {int(c): np.flatnonzero(y_orig == c) for c in np.unique(y_orig)}
    rng = PortableRng(derive_seed(plan.seed, "unlearn-shuffle"))
    sign = 1.0 if plan.ascend else -1.0
    losses = []
    for _ in range(plan.epochs):
        total = 0.0
        count = 0
        for c in sorted(groups):
            idx = groups[c]
            proj = cache.for_excluded(c).projectors if cache is not None else None
            perm = idx[rng.permutation(idx.size)]
            for start in range(0, perm.size, plan.batch_size):
                sel = perm[start : start + plan.batch_size]
                loss, grads = nn.loss_and_grads(out, feats[sel], y_train[sel])
                total += loss * sel.size
                count += sel.size
                for li, (w, g) in enumerate(zip(out.weights, grads.per_layer)):
                    step = apply_projection(g, proj[li]) if proj is not None else g
                    w += sign * plan.lr * step
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise NumericError("unlearning loss went non-finite")
        losses.append(epoch_loss)
    return UnlearnResult(network=out, plan=plan, epoch_losses=losses, labeled=labeled)


def _label_for_plan(net_o: nn.Network, d_u, plan: UnlearnPlan) -> PseudoLabeledSet:
    if plan.labeling == "pseudo":
        return pseudo_label_set(net_o, d_u, plan.unlearn_classes)
    if plan.labeling == "random":
        return random_label_set(d_u, net_o.n_classes, plan.unlearn_classes, plan.seed)
    labels = np.asarray(d_u.labels, dtype=np.int64).reshape(-1)
    return PseudoLabeledSet(
        features=np.asarray(d_u.features, dtype=np.float64),
        original_labels=labels,
        assigned_labels=labels.copy(),
        labeling="keep",
    )


def calibrated_unlearn(net_o: nn.Network, d_u, cache: ProjectorCache, plan: UnlearnPlan) -> UnlearnResult:
    """The full method: pseudo-labels plus null-space projected fine-tuning.

    A zero epoch budget returns the original weights untouched.
    """
    if plan.labeling != "pseudo" or not plan.use_null_space:
        raise ValueError("calibrated_unlearn runs the pseudo+nullspace plan; use baseline_unlearn for variants")
    labeled = _label_for_plan(net_o, d_u, plan)
    return _finetune(net_o, labeled, cache, plan)


def baseline_unlearn(
    net_o: nn.Network, d_u, plan: UnlearnPlan, cache: ProjectorCache | None = None
) -> UnlearnResult:
    """Any labeling/projection/ascent combination the plan validates."""
    if plan.use_null_space and cache is None:
        raise ValueError("plan requests null-space projection but no projector cache was supplied")
    labeled = _label_for_plan(net_o, d_u, plan)
    return _finetune(net_o, labeled, cache if plan.use_null_space else None, plan)


def retrain(d_r_train, d_r_val, specs, input_shape, schedule: nn.TrainSchedule, seed: int) -> nn.Network:
    """Reference model: fresh seeded initialization trained on the remaining data only."""
    fresh = nn.init_network(specs, input_shape, seed=seed)
    return nn.train(fresh, d_r_train, d_r_val, schedule)
