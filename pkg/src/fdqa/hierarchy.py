"""Two-stage hierarchical quality classifier and its flat 3-class baseline.

Stage 1 (Model-1) separates high from low quality.  High-quality images are
passed to Model-2 (Good vs Usable), low-quality ones to Model-3 (Usable vs
Unusable), so Usable can emerge from either branch.  Each stage network has
two logits; its positive-class probability is ``sigmoid(z1 - z0)``, i.e. the
softmax probability of logit 1.
"""

from __future__ import annotations

import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbones import ArchConfig, Network, build
from .checkpoint import load_checkpoint, save_checkpoint
from .labels import STAGES, QualityLabel, StageRole
from .metrics import ConfusionMatrix, confusion_from_arrays, report
from .optim import Adam
from .tensor import GradientTape, Tensor, backward

POSITIVE, NEGATIVE = 1, 0
EXCLUDED = None
DEFAULT_BACKBONES = ("dense", "dense", "eff")
STAGE1_USABLE_CHOICES = ("exclude", "positive", "negative")

# (positive label, negative label) per role; the third label is excluded
_STAGE_CLASSES = {
    StageRole.HIGH_VS_LOW: (QualityLabel.GOOD, QualityLabel.UNUSABLE),
    StageRole.GOOD_VS_USABLE: (QualityLabel.GOOD, QualityLabel.USABLE),
    StageRole.USABLE_VS_UNUSABLE: (QualityLabel.USABLE, QualityLabel.UNUSABLE),
}
_DECISIONS = {
    StageRole.HIGH_VS_LOW: ("high", "low"),
    StageRole.GOOD_VS_USABLE: ("good", "usable"),
    StageRole.USABLE_VS_UNUSABLE: ("usable", "unusable"),
}


class TrainingError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A loss or parameter became NaN/Inf during training."""


def relabel_for_stage(label: QualityLabel | int, role: StageRole, stage1_usable: str = "exclude") -> int | None:
    """Binary target (1 positive, 0 negative) for ``role`` or ``None`` if excluded.

    ``stage1_usable`` only affects Model-1 and is an ablation switch; the
    default keeps Model-1 on the extremes.
    """
    label = QualityLabel(int(label))
    if role is StageRole.HIGH_VS_LOW and label is QualityLabel.USABLE:
        if stage1_usable not in STAGE1_USABLE_CHOICES:
            raise ValueError(f"stage1_usable must be one of {STAGE1_USABLE_CHOICES}")
        return {"exclude": EXCLUDED, "positive": POSITIVE, "negative": NEGATIVE}[stage1_usable]
    pos, neg = _STAGE_CLASSES[role]
    if label is pos:
        return POSITIVE
    if label is neg:
        return NEGATIVE
    return EXCLUDED


def stage_targets(labels: np.ndarray, role: StageRole, stage1_usable: str = "exclude") -> tuple[np.ndarray, np.ndarray]:
    """Indices kept for ``role`` and their binary targets."""
    keep, targets = [], []
    for i, lab in enumerate(np.asarray(labels).reshape(-1)):
        t = relabel_for_stage(int(lab), role, stage1_usable)
        if t is not EXCLUDED:
            keep.append(i)
            targets.append(t)
    return np.asarray(keep, dtype=np.int64), np.asarray(targets, dtype=np.int64)


def positive_probability(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return T.sigmoid(z[..., 1] - z[..., 0])


# --------------------------------------------------------------------------
# models


@dataclass
class StageModel:
    role: StageRole
    network: Network
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"{self.role.model_name} threshold must lie strictly in (0, 1), got {self.threshold}")
        if self.network.num_outputs != 2:
            raise ValueError(f"{self.role.model_name} needs a 2-logit network, got {self.network.num_outputs}")

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        return positive_probability(self.network.logits(images))

    def probability(self, image: Tensor) -> float:
        self.network.check_input(image)
        return float(positive_probability(self.network.forward(image).data))


@dataclass(frozen=True)
class PathStep:
    role: StageRole
    probability: float
    decision: str

    @property
    def positive(self) -> bool:
        return self.decision == _DECISIONS[self.role][0]


@dataclass(frozen=True)
class Prediction:
    label: QualityLabel
    path: tuple[PathStep, PathStep]
    explainer_role: StageRole

    @property
    def stage2(self) -> PathStep:
        return self.path[1]


@dataclass
class HierarchicalClassifier:
    model1: StageModel
    model2: StageModel
    model3: StageModel

    def __post_init__(self):
        for m, role in zip(self.stages, STAGES):
            if m.role is not role:
                raise ValueError(f"stage slot for {role.model_name} holds a {m.role.model_name} model")
        res = {m.network.resolution for m in self.stages}
        if len(res) != 1:
            raise ValueError(f"stage networks disagree on input resolution: {sorted(res)}")

    @property
    def stages(self) -> tuple[StageModel, StageModel, StageModel]:
        return (self.model1, self.model2, self.model3)

    @property
    def thresholds(self) -> tuple[float, float, float]:
        return tuple(m.threshold for m in self.stages)

    @property
    def resolution(self) -> int:
        return self.model1.network.resolution

    def stage(self, role: StageRole) -> StageModel:
        return self.stages[STAGES.index(role)]

    def with_thresholds(self, thresholds: Sequence[float]) -> "HierarchicalClassifier":
        t1, t2, t3 = thresholds
        return HierarchicalClassifier(
            replace(self.model1, threshold=t1), replace(self.model2, threshold=t2), replace(self.model3, threshold=t3)
        )


# --------------------------------------------------------------------------
# routing


def route(p1: float, p2: float, p3: float, thresholds: Sequence[float] = (0.5, 0.5, 0.5)) -> Prediction:
    """Hard routing of precomputed stage probabilities (only the branch taken is used)."""
    t1, t2, t3 = thresholds
    high = p1 >= t1
    first = PathStep(StageRole.HIGH_VS_LOW, float(p1), "high" if high else "low")
    if high:
        role, p, positive = StageRole.GOOD_VS_USABLE, p2, p2 >= t2
        label = QualityLabel.GOOD if positive else QualityLabel.USABLE
    else:
        role, p, positive = StageRole.USABLE_VS_UNUSABLE, p3, p3 >= t3
        label = QualityLabel.USABLE if positive else QualityLabel.UNUSABLE
    second = PathStep(role, float(p), _DECISIONS[role][0 if positive else 1])
    return Prediction(label, (first, second), role)


def route_labels(probs: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """Vectorised :func:`route` over an ``N x 3`` probability array; returns label codes."""
    t1, t2, t3 = thresholds
    p = np.asarray(probs)
    high = p[:, 0] >= t1
    upper = np.where(p[:, 1] >= t2, QualityLabel.GOOD, QualityLabel.USABLE)
    lower = np.where(p[:, 2] >= t3, QualityLabel.USABLE, QualityLabel.UNUSABLE)
    return np.where(high, upper, lower).astype(np.int64)


def predict(hc: HierarchicalClassifier, image: Tensor) -> Prediction:
    """Run Model-1, then only the second-stage model it routes to."""
    hc.model1.network.check_input(image)
    p1 = hc.model1.probability(image)
    if p1 >= hc.model1.threshold:
        p2, p3 = hc.model2.probability(image), math.nan
    else:
        p2, p3 = math.nan, hc.model3.probability(image)
    return route(p1, p2, p3, hc.thresholds)


def stage_probabilities(hc: HierarchicalClassifier, images: np.ndarray, workers: int = 1, batch_size: int = 64) -> np.ndarray:
    """``N x 3`` positive-class probabilities of all three stages (read-only inference)."""
    images = np.asarray(images, dtype=T.FLOAT)
    if images.ndim != 4 or images.shape[1:] != (3, hc.resolution, hc.resolution):
        r = hc.resolution
        raise T.ShapeError(f"expected N x 3 x {r} x {r} images, got {list(images.shape)}")
    if workers <= 1 or len(images) <= batch_size:
        return np.stack([m.probabilities(images) for m in hc.stages], axis=1)
    chunks = [images[i : i + batch_size] for i in range(0, len(images), batch_size)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: np.stack([m.probabilities(c) for m in hc.stages], axis=1), chunks))
    return np.concatenate(parts)


def predict_batch(hc: HierarchicalClassifier, images: np.ndarray, workers: int = 1) -> list[Prediction]:
    probs = stage_probabilities(hc, images, workers=workers)
    return [route(*row, hc.thresholds) for row in probs]


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    stage1_usable: str = "exclude"
    freeze_prefix: tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.stage1_usable not in STAGE1_USABLE_CHOICES:
            raise ValueError(f"stage1_usable must be one of {STAGE1_USABLE_CHOICES}")


@dataclass
class TrainResult:
    network: Network
    losses: list[float]  # mean training loss per epoch
    initial_loss: float
    num_train: int
    class_counts: tuple[int, ...]
    seconds: float


def _stage_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    z = T.sub(T.take(logits, 1), T.take(logits, 0))
    return T.sigmoid_bce(z, targets)


def _flat_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    return T.softmax_cross_entropy(logits, targets)


def _dataset_loss(net: Network, X: np.ndarray, targets: np.ndarray, loss_fn, batch_size: int) -> float:
    """Training-mode mean loss without touching parameters or running stats."""
    saved = {k: (s.mean, s.var) for k, s in net.stats.items()}
    total = 0.0
    for b in range(0, len(X), batch_size):
        xb = Tensor(X[b : b + batch_size])
        total += loss_fn(net.forward(xb, training=True), targets[b : b + batch_size]).item() * len(xb.data)
    for k, (m, v) in saved.items():
        net.stats[k].mean, net.stats[k].var = m, v
    return total / len(X)


def fit(
    net: Network, X: np.ndarray, targets: np.ndarray, loss_fn, cfg: TrainConfig, seed: int, log=None
) -> tuple[list[float], float]:
    """Mini-batch Adam on ``net`` in place; returns (per-epoch losses, initial loss)."""
    if len(X) == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(seed)
    opt = Adam(lr=cfg.lr)
    trainable = [n for n in net.params if not n.startswith(tuple(cfg.freeze_prefix))] if cfg.freeze_prefix else list(net.params)
    initial = _dataset_loss(net, X, targets, loss_fn, cfg.batch_size)
    if not math.isfinite(initial):
        raise NumericError("initial loss is not finite")
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for b in range(0, len(X), cfg.batch_size):
            idx = np.sort(order[b : b + cfg.batch_size])
            with GradientTape() as tape:
                loss = loss_fn(net.forward(Tensor(X[idx]), training=True), targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} in epoch {epoch + 1}")
            grads = backward(tape, loss)
            opt.step(net.params, {n: grads.array(net.params[n]) for n in trainable})
            total += value * len(idx)
        history.append(total / len(X))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f}")
    if cfg.epochs > 0:
        recalibrate_bn(net, X, cfg.batch_size, seed)
    return history, initial


def recalibrate_bn(net: Network, X: np.ndarray, batch_size: int, seed: int = 0) -> None:
    """Replace the moving-average BN statistics by population statistics.

    The moving averages trail weights that were still changing, which can
    leave inference-mode outputs far from what training optimised; one pass
    over shuffled training batches with the final weights fixes that.
    """
    if not net.stats:
        return
    order = np.random.default_rng([seed, 1]).permutation(len(X))
    for st in net.stats.values():
        st.count = 0
    try:
        for b in range(0, len(X), batch_size):
            net.forward(Tensor(X[np.sort(order[b : b + batch_size])]), training=True)
    finally:
        for st in net.stats.values():
            st.count = None


def train_stage(
    model: StageModel, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig = TrainConfig(), seed: int = 0, log=None
) -> tuple[StageModel, TrainResult]:
    """Train ``model`` on its relabeled subset of ``(images, labels)``.

    ``labels`` are 3-class quality codes; excluded images are dropped.
    """
    keep, targets = stage_targets(labels, model.role, cfg.stage1_usable)
    counts = tuple(int(np.sum(targets == c)) for c in (NEGATIVE, POSITIVE))
    if len(keep) == 0 or min(counts) == 0:
        raise TrainingError(
            f"{model.role.model_name} needs both classes after relabeling, got negative={counts[0]} positive={counts[1]}"
        )
    t0 = time.perf_counter()
    losses, initial = fit(model.network, np.asarray(images)[keep], targets, _stage_loss, cfg, seed, log)
    res = TrainResult(model.network, losses, initial, len(keep), counts, time.perf_counter() - t0)
    return model, res


@dataclass
class StageSpec:
    backbone: str = "dense"
    config: ArchConfig | None = None
    threshold: float = 0.5


def _train_one(args):
    role, spec, images, labels, cfg, seed, resolution = args
    net = build(spec.backbone, 2, seed=seed, config=spec.config, resolution=resolution)
    return train_stage(StageModel(role, net, spec.threshold), images, labels, cfg, seed)


def train_hierarchy(
    images: np.ndarray,
    labels: np.ndarray,
    specs: Sequence[StageSpec] | None = None,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    workers: int = 1,
    log=None,
) -> tuple[HierarchicalClassifier, dict[StageRole, TrainResult]]:
    """Train Model-1..3 independently; stage ``i`` uses seed ``seed + i``.

    With ``workers > 1`` the stages train in separate processes (they share no
    state); results are identical to sequential training.
    """
    if specs is None:
        specs = [StageSpec(b) for b in DEFAULT_BACKBONES]
    if len(specs) != 3:
        raise ValueError("exactly three stage specs are required")
    resolution = int(np.asarray(images).shape[-1])
    jobs = [(role, spec, images, labels, cfg, seed + i, resolution) for i, (role, spec) in enumerate(zip(STAGES, specs))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, 3)) as pool:
            out = list(pool.map(_train_one, jobs))
    else:
        out = []
        for job in jobs:
            if log is not None:
                log(f"training {job[0].model_name} ({job[1].backbone})")
            out.append(_train_one(job))
    models = [m for m, _ in out]
    return HierarchicalClassifier(*models), {m.role: r for m, r in out}


# --------------------------------------------------------------------------
# flat baseline


def build_flat_baseline(backbone: str = "dense", seed: int = 0, config: ArchConfig | None = None, resolution: int | None = None) -> Network:
    return build(backbone, 3, seed=seed, config=config, resolution=resolution)


def train_flat(net: Network, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig = TrainConfig(), seed: int = 0, log=None) -> TrainResult:
    y = np.asarray(labels, dtype=np.int64)
    counts = tuple(int(np.sum(y == c)) for c in range(3))
    t0 = time.perf_counter()
    losses, initial = fit(net, np.asarray(images), y, _flat_loss, cfg, seed, log)
    return TrainResult(net, losses, initial, len(y), counts, time.perf_counter() - t0)


def predict_flat(logits: np.ndarray) -> np.ndarray:
    """Argmax over 3 logits; ties go to the lowest class index."""
    z = np.asarray(logits)
    return np.argmax(z, axis=-1).astype(np.int64)


# --------------------------------------------------------------------------
# threshold sweeps


def threshold_grid(*axes: Iterable[float]) -> list[tuple[float, float, float]]:
    if len(axes) == 1:
        axes = axes * 3
    if len(axes) != 3:
        raise ValueError("threshold_grid takes one axis (shared) or three")
    return [tuple(float(v) for v in t) for t in product(*axes)]


def sweep_thresholds(
    hc: HierarchicalClassifier,
    images: np.ndarray | None,
    labels: np.ndarray,
    grid: Sequence[Sequence[float]],
    probs: np.ndarray | None = None,
) -> list[tuple[tuple[float, float, float], ConfusionMatrix]]:
    """One confusion matrix per threshold triple; stage probabilities are computed once."""
    if not grid:
        raise ValueError("threshold grid is empty")
    for triple in grid:
        if len(triple) != 3 or not all(0.0 < t < 1.0 for t in triple):
            raise ValueError(f"threshold triple {tuple(triple)} must hold three values in (0, 1)")
    if probs is None:
        probs = stage_probabilities(hc, images)
    return [(tuple(map(float, t)), confusion_from_arrays(labels, route_labels(probs, t))) for t in grid]


# --------------------------------------------------------------------------
# persistence and export

_CKPT_NAMES = ("model1.fdqa", "model2.fdqa", "model3.fdqa")


def save_hierarchy(hc: HierarchicalClassifier, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m, name in zip(hc.stages, _CKPT_NAMES):
        save_checkpoint(m.network, d / name)
    (d / "thresholds.txt").write_text("".join(f"{m.role.value} = {m.threshold!r}\n" for m in hc.stages), encoding="utf-8")


def load_hierarchy(directory: str | os.PathLike) -> HierarchicalClassifier:
    d = Path(directory)
    thresholds = {role.value: 0.5 for role in STAGES}
    tpath = d / "thresholds.txt"
    if tpath.exists():
        for line in tpath.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            if key.strip() in thresholds:
                thresholds[key.strip()] = float(value)
    models = [StageModel(role, load_checkpoint(d / name), thresholds[role.value]) for role, name in zip(STAGES, _CKPT_NAMES)]
    return HierarchicalClassifier(*models)


PREDICTION_HEADER = "image_id,predicted_code,true_code,m1_prob,stage2_role,stage2_prob"


def prediction_row(image_id: str, pred: Prediction, true_code: int | None = None) -> str:
    t = "" if true_code is None else str(int(true_code))
    return f"{image_id},{int(pred.label)},{t},{pred.path[0].probability:.6f},{pred.stage2.role.value},{pred.stage2.probability:.6f}"


def predictions_csv(ids: Sequence[str], preds: Sequence[Prediction], true_codes: Sequence[int] | None = None, seed: int | None = None) -> str:
    out = io.StringIO()
    if seed is not None:
        out.write(f"# seed={seed}\n")
    out.write(PREDICTION_HEADER + "\n")
    for i, (img, p) in enumerate(zip(ids, preds)):
        out.write(prediction_row(img, p, None if true_codes is None else true_codes[i]) + "\n")
    return out.getvalue()


@dataclass
class Comparison:
    hierarchical: ConfusionMatrix
    flat: ConfusionMatrix
    notes: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        h, f = report(self.hierarchical), report(self.flat)
        lines = ["hierarchical vs flat 3-class comparison (test split)"]
        lines += [f"{k}: {v}" for k, v in self.notes.items()]
        lines.append(f"{'metric':<10} {'hierarchical':>13} {'flat':>8}")
        for (name, hv), (_, fv) in zip(h.rows(), f.rows()):
            lines.append(f"{name:<10} {hv:>13.4f} {fv:>8.4f}")
        lines.append("")
        lines.append(h.to_text("hierarchical").rstrip("\n"))
        lines.append("")
        lines.append(f.to_text("flat").rstrip("\n"))
        return "\n".join(lines) + "\n"
