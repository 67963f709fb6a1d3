"""Trainable multi-task head over raw features.

Topology: a shared 512->512 linear+relu projection whose output doubles as
the search embedding, then per task a 512->128 linear+relu branch and a
128->K linear classifier. Training is plain SGD over shuffled mini-batches
with a triangular cyclic learning rate; the total loss is the weighted sum
of per-task cross-entropies. Samples may be labeled for any subset of tasks;
unlabeled tasks contribute neither loss nor gradient.

Everything runs in float64 numpy and is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FEATURE_DIM, TASK_FEATURE_DIM, Embedding, normalize

#: Loss weights: product type dominates, color matters, everything else is a hint.
DEFAULT_TASK_WEIGHTS = {"product_type": 1.0, "color": 0.3}
OTHER_TASK_WEIGHT = 0.1

#: The thirteen auxiliary attribute tasks of the largest embedding variant.
EXTRA_TASK_NAMES = (
    "pattern", "shape", "shoulder_type", "neck_type", "sleeve_type",
    "collar_type", "fit", "length", "material", "closure_type",
    "hem_type", "waist_type", "occasion",
)

MISSING_LABEL = -1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, epoch: int, loss: float) -> None:
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


class ModelFileError(ValueError):
    """Raised for malformed model checkpoint files."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    num_classes: int
    weight: float

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"task {self.name!r} needs >= 2 classes")
        if self.weight < 0:
            raise ValueError(f"task {self.name!r} weight must be non-negative")


def default_weight(task_name: str) -> float:
    return DEFAULT_TASK_WEIGHTS.get(task_name, OTHER_TASK_WEIGHT)


def variant_config(
    variant: str,
    num_product_types: int,
    num_colors: int = 12,
    num_extra_classes: int = 4,
) -> tuple[TaskSpec, ...]:
    """Task lists for the three embedding variants.

    V1 classifies product type only; V2 adds color; V3 adds thirteen further
    attribute tasks. Class counts for the extra tasks are configurable since
    they depend on the attribute vocabulary in use.
    """
    v = variant.upper()
    specs = [TaskSpec("product_type", num_product_types, default_weight("product_type"))]
    if v in ("V2", "V3"):
        specs.append(TaskSpec("color", num_colors, default_weight("color")))
    if v == "V3":
        specs.extend(
            TaskSpec(name, num_extra_classes, default_weight(name)) for name in EXTRA_TASK_NAMES
        )
    if v not in ("V1", "V2", "V3"):
        raise ValueError(f"unknown variant {variant!r}")
    return tuple(specs)


@dataclass(frozen=True)
class CyclicLRSchedule:
    base_lr: float
    max_lr: float
    step_size: int
    num_cycles: int = 2

    def __post_init__(self) -> None:
        if not (0 < self.base_lr < self.max_lr):
            raise ValueError("need 0 < base_lr < max_lr")
        if self.step_size < 1 or self.num_cycles < 1:
            raise ValueError("step_size and num_cycles must be >= 1")


def lr_at(schedule: CyclicLRSchedule, t: int) -> float:
    """Triangular cyclic learning rate at iteration t.

    lr oscillates linearly between base_lr and max_lr with period
    2*step_size: base at t=0, max at t=step_size, base again at 2*step_size.
    Evaluated as a convex combination so the endpoints are exact.
    """
    if t < 0:
        raise ValueError("iteration must be >= 0")
    cycle = math.floor(1 + t / (2 * schedule.step_size))
    x = abs(t / schedule.step_size - 2 * cycle + 1)
    f = max(0.0, 1.0 - x)
    return schedule.base_lr * (1.0 - f) + schedule.max_lr * f


@dataclass(frozen=True)
class TrainSample:
    feature: np.ndarray
    labels: dict[str, int] = field(default_factory=dict)


@dataclass
class MultiTaskModel:
    """Parameter container; all arrays float64, applied as x @ w + b."""

    task_specs: tuple[TaskSpec, ...]
    shared_w: np.ndarray                 # (512, 512)
    shared_b: np.ndarray                 # (512,)
    branch_w: dict[str, np.ndarray]      # (512, 128) per task
    branch_b: dict[str, np.ndarray]      # (128,) per task
    head_w: dict[str, np.ndarray]        # (128, K) per task
    head_b: dict[str, np.ndarray]        # (K,) per task

    def spec(self, task: str) -> TaskSpec:
        for s in self.task_specs:
            if s.name == task:
                return s
        raise KeyError(task)

    def parameter_blocks(self) -> dict[str, np.ndarray]:
        blocks = {"shared_w": self.shared_w, "shared_b": self.shared_b}
        for s in self.task_specs:
            blocks[f"branch_w:{s.name}"] = self.branch_w[s.name]
            blocks[f"branch_b:{s.name}"] = self.branch_b[s.name]
            blocks[f"head_w:{s.name}"] = self.head_w[s.name]
            blocks[f"head_b:{s.name}"] = self.head_b[s.name]
        return blocks

    def copy(self) -> "MultiTaskModel":
        return MultiTaskModel(
            self.task_specs,
            self.shared_w.copy(),
            self.shared_b.copy(),
            {k: v.copy() for k, v in self.branch_w.items()},
            {k: v.copy() for k, v in self.branch_b.items()},
            {k: v.copy() for k, v in self.head_w.items()},
            {k: v.copy() for k, v in self.head_b.items()},
        )


def init_model(task_specs: tuple[TaskSpec, ...], seed: int = 0) -> MultiTaskModel:
    """He-initialized weights, zero biases, seeded for reproducibility."""
    rng = np.random.default_rng(seed)

    def he(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    return MultiTaskModel(
        task_specs=tuple(task_specs),
        shared_w=he(FEATURE_DIM, (FEATURE_DIM, FEATURE_DIM)),
        shared_b=np.zeros(FEATURE_DIM),
        branch_w={s.name: he(FEATURE_DIM, (FEATURE_DIM, TASK_FEATURE_DIM)) for s in task_specs},
        branch_b={s.name: np.zeros(TASK_FEATURE_DIM) for s in task_specs},
        head_w={s.name: he(TASK_FEATURE_DIM, (TASK_FEATURE_DIM, s.num_classes)) for s in task_specs},
        head_b={s.name: np.zeros(s.num_classes) for s in task_specs},
    )


def identity_model(task_specs: tuple[TaskSpec, ...]) -> MultiTaskModel:
    """Pass-through model: embedding = relu(feature), all logits zero.

    Useful as the untrained baseline; classifiers emit uniform probabilities.
    """
    return MultiTaskModel(
        task_specs=tuple(task_specs),
        shared_w=np.eye(FEATURE_DIM),
        shared_b=np.zeros(FEATURE_DIM),
        branch_w={s.name: np.zeros((FEATURE_DIM, TASK_FEATURE_DIM)) for s in task_specs},
        branch_b={s.name: np.zeros(TASK_FEATURE_DIM) for s in task_specs},
        head_w={s.name: np.zeros((TASK_FEATURE_DIM, s.num_classes)) for s in task_specs},
        head_b={s.name: np.zeros(s.num_classes) for s in task_specs},
    )


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def forward(
    model: MultiTaskModel, features: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Embedding and per-task logits for one feature vector or a batch.

    embedding = relu(x @ shared_w + shared_b); per task the logits are
    head(relu(branch(embedding))). Output rank follows input rank.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != FEATURE_DIM:
        raise ValueError(f"features must be {FEATURE_DIM}-D, got {x.shape[1]}")
    emb = _relu(x @ model.shared_w + model.shared_b)
    logits = {}
    for s in model.task_specs:
        t = _relu(emb @ model.branch_w[s.name] + model.branch_b[s.name])
        logits[s.name] = t @ model.head_w[s.name] + model.head_b[s.name]
    if single:
        return emb[0], {k: v[0] for k, v in logits.items()}
    return emb, logits


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with log-sum-exp stabilization."""
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _as_label_array(labels, n: int) -> np.ndarray:
    arr = np.full(n, MISSING_LABEL, dtype=np.int64) if labels is None else \
        np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {arr.shape}")
    return arr


def multitask_loss(
    task_logits: dict[str, np.ndarray],
    labels: dict[str, np.ndarray | int | None],
    specs: tuple[TaskSpec, ...],
) -> tuple[float, dict[str, float]]:
    """Weighted cross-entropy across tasks.

    Per task the loss is the mean negative log-probability of the true class
    over labeled samples (label -1 or a missing task means unlabeled); a task
    with no labels contributes exactly 0. Returns the weighted total and the
    unweighted per-task losses. Raises if nothing at all is labeled.
    """
    total = 0.0
    per_task: dict[str, float] = {}
    any_labeled = False
    for s in specs:
        z = np.asarray(task_logits[s.name], dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        lab = _as_label_array(labels.get(s.name), z.shape[0])
        mask = lab != MISSING_LABEL
        if not mask.any():
            per_task[s.name] = 0.0
            continue
        if (lab[mask] < 0).any() or (lab[mask] >= s.num_classes).any():
            raise ValueError(f"label out of range for task {s.name!r}")
        any_labeled = True
        logp = _log_softmax(z[mask])
        loss = float(-logp[np.arange(mask.sum()), lab[mask]].mean())
        per_task[s.name] = loss
        total += s.weight * loss
    if not any_labeled:
        raise ValueError("no task has any labeled sample")
    return total, per_task


def loss_and_grads(
    model: MultiTaskModel,
    features: np.ndarray,
    labels: dict[str, np.ndarray],
) -> tuple[float, dict[str, float], dict[str, np.ndarray]]:
    """Total loss plus analytic gradients for every parameter block.

    Gradient keys match ``parameter_blocks``. Backpropagation runs through
    the shared layer, every branch, and every classifier head in one pass.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    h_pre = x @ model.shared_w + model.shared_b
    h = _relu(h_pre)

    grads: dict[str, np.ndarray] = {}
    d_h = np.zeros_like(h)
    total = 0.0
    per_task: dict[str, float] = {}
    any_labeled = False
    for s in model.task_specs:
        t_pre = h @ model.branch_w[s.name] + model.branch_b[s.name]
        t = _relu(t_pre)
        z = t @ model.head_w[s.name] + model.head_b[s.name]
        lab = _as_label_array(labels.get(s.name), n)
        mask = lab != MISSING_LABEL
        if not mask.any():
            per_task[s.name] = 0.0
            for kind, shape_of in (
                ("branch_w", model.branch_w), ("branch_b", model.branch_b),
                ("head_w", model.head_w), ("head_b", model.head_b),
            ):
                grads[f"{kind}:{s.name}"] = np.zeros_like(shape_of[s.name])
            continue
        any_labeled = True
        n_lab = int(mask.sum())
        logp = _log_softmax(z[mask])
        loss = float(-logp[np.arange(n_lab), lab[mask]].mean())
        per_task[s.name] = loss
        total += s.weight * loss

        d_z = np.zeros_like(z)
        p = np.exp(logp)
        p[np.arange(n_lab), lab[mask]] -= 1.0
        d_z[mask] = p * (s.weight / n_lab)

        grads[f"head_w:{s.name}"] = t.T @ d_z
        grads[f"head_b:{s.name}"] = d_z.sum(axis=0)
        d_t = d_z @ model.head_w[s.name].T
        d_t_pre = d_t * (t_pre > 0)
        grads[f"branch_w:{s.name}"] = h.T @ d_t_pre
        grads[f"branch_b:{s.name}"] = d_t_pre.sum(axis=0)
        d_h += d_t_pre @ model.branch_w[s.name].T
    if not any_labeled:
        raise ValueError("no task has any labeled sample")
    d_h_pre = d_h * (h_pre > 0)
    grads["shared_w"] = x.T @ d_h_pre
    grads["shared_b"] = d_h_pre.sum(axis=0)
    return total, per_task, grads


def stack_samples(
    samples: list[TrainSample], specs: tuple[TaskSpec, ...]
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Pack a sample list into a feature matrix and per-task label arrays."""
    x = np.stack([np.asarray(s.feature, dtype=np.float64) for s in samples])
    labels = {
        spec.name: np.array(
            [s.labels.get(spec.name, MISSING_LABEL) for s in samples], dtype=np.int64
        )
        for spec in specs
    }
    return x, labels


def train(
    model: MultiTaskModel,
    samples: list[TrainSample],
    schedule: CyclicLRSchedule,
    epochs: int,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[MultiTaskModel, list[float]]:
    """Plain SGD; returns the trained model and per-epoch mean loss.

    The input model is not mutated. Batches come from a seeded shuffle, so a
    fixed (model, samples, schedule, seed) tuple reproduces parameters
    bit for bit. Raises TrainingDivergedError when the loss turns non-finite.
    """
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    x, labels = stack_samples(samples, model.task_specs)
    m = model.copy()
    rng = np.random.default_rng(seed)
    history: list[float] = []
    t = 0
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch_labels = {k: v[idx] for k, v in labels.items()}
            loss, _, grads = loss_and_grads(m, x[idx], batch_labels)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            lr = lr_at(schedule, t)
            m.shared_w -= lr * grads["shared_w"]
            m.shared_b -= lr * grads["shared_b"]
            for s in m.task_specs:
                m.branch_w[s.name] -= lr * grads[f"branch_w:{s.name}"]
                m.branch_b[s.name] -= lr * grads[f"branch_b:{s.name}"]
                m.head_w[s.name] -= lr * grads[f"head_w:{s.name}"]
                m.head_b[s.name] -= lr * grads[f"head_b:{s.name}"]
            t += 1
            batch_losses.append(loss)
        history.append(float(np.mean(batch_losses)))
    return m, history


def extract_embedding(model: MultiTaskModel, feature: np.ndarray) -> Embedding:
    """Search embedding plus per-task 128-D branch activations."""
    x = np.asarray(feature, dtype=np.float64)
    emb = _relu(x @ model.shared_w + model.shared_b)
    base = normalize(emb)
    task_features = {
        s.name: _relu(emb @ model.branch_w[s.name] + model.branch_b[s.name])
        for s in model.task_specs
    }
    return Embedding(base=base, task_features=task_features)


def predict(model: MultiTaskModel, features: np.ndarray, task: str) -> np.ndarray:
    """Argmax class ids for one task; ties resolve to the lowest id."""
    _, logits = forward(model, features)
    z = logits[task]
    return np.asarray(np.argmax(z, axis=-1))


# -- checkpoint format -------------------------------------------------------
#
# Layout: magic "STMD", version u16, task count u16; per task a name (u16
# length + utf8 bytes), num_classes u32, weight f64. Then parameter blocks as
# little-endian float32 in a fixed order: shared_w, shared_b, then per task
# branch_w, branch_b, head_w, head_b.

_MODEL_MAGIC = b"STMD"
_MODEL_VERSION = 1


def save_model(model: MultiTaskModel, path: str | Path) -> None:
    parts = [_MODEL_MAGIC, struct.pack("<HH", _MODEL_VERSION, len(model.task_specs))]
    for s in model.task_specs:
        name = s.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<Id", s.num_classes, s.weight))
    for block in _ordered_blocks(model):
        parts.append(np.ascontiguousarray(block, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> MultiTaskModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != _MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model checkpoint")
    version, n_tasks = struct.unpack("<HH", raw[4:8])
    if version != _MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported version {version}")
    off = 8
    specs = []
    try:
        for _ in range(n_tasks):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            num_classes, weight = struct.unpack_from("<Id", raw, off)
            off += 12
            specs.append(TaskSpec(name, num_classes, weight))
    except struct.error:
        raise ModelFileError(f"{path}: truncated header") from None
    specs = tuple(specs)
    model = identity_model(specs)
    for block in _ordered_blocks(model):
        nbytes = block.size * 4
        if off + nbytes > len(raw):
            raise ModelFileError(f"{path}: truncated parameter data")
        block[...] = np.frombuffer(raw[off:off + nbytes], dtype="<f4").reshape(block.shape)
        off += nbytes
    if off != len(raw):
        raise ModelFileError(f"{path}: {len(raw) - off} trailing bytes")
    return model


def _ordered_blocks(model: MultiTaskModel) -> list[np.ndarray]:
    blocks = [model.shared_w, model.shared_b]
    for s in model.task_specs:
        blocks.extend(
            (model.branch_w[s.name], model.branch_b[s.name],
             model.head_w[s.name], model.head_b[s.name])
        )
    return blocks
