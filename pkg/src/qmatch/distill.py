"""Queue-based student-teacher distribution matching.

The queue holds the most recent unit-norm teacher embeddings.  Student and
teacher embeddings are each multiplied against the queue to produce logits;
the temperatured softmaxes of those logits are the two distributions, and the
loss is the mean cross-entropy from the (stop-gradient) teacher distribution
to the student distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import CorruptionConfig, make_views
from .model import EmaParams, ModelParams, ema_update, encoder_forward, projector_forward
from .tensor import (
    Tensor,
    ValidationError,
    backward,
    cross_entropy_rows,
    l2_normalize_rows,
    softmax_rows,
)


@dataclass
class QMatchConfig:
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    tau_ema: float = 0.9
    queue_capacity: int = 512

    def __post_init__(self):
        if self.tau_student <= 0 or self.tau_teacher <= 0:
            raise ValueError("temperatures must be strictly positive")
        if self.queue_capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {self.queue_capacity}")


class EmbeddingQueue:
    """Fixed-capacity FIFO of L2-normalized embeddings, backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int, storage: np.ndarray | None = None,
                 cursor: int = 0, validate: bool = False):
        if capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        if storage is None:
            storage = np.zeros((capacity, dim))
        if storage.shape != (capacity, dim):
            raise ValueError(f"storage shape {storage.shape} != ({capacity}, {dim})")
        self.storage = storage
        self.cursor = cursor  # next write position == oldest row once warm
        self.fill = capacity
        self.validate = validate

    def push(self, batch: np.ndarray):
        """Overwrite the oldest rows with the batch, preserving FIFO order."""
        b = len(batch)
        if b > self.capacity:
            raise ValueError(f"batch of {b} exceeds queue capacity {self.capacity}")
        if batch.shape[1] != self.dim:
            raise ValueError(f"batch dim {batch.shape[1]} != queue dim {self.dim}")
        if self.validate:
            norms = np.linalg.norm(batch, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValidationError("queue rows must be unit-norm")
        end = self.cursor + b
        if end <= self.capacity:
            self.storage[self.cursor:end] = batch
        else:
            split = self.capacity - self.cursor
            self.storage[self.cursor:] = batch[:split]
            self.storage[:end - self.capacity] = batch[split:]
        self.cursor = end % self.capacity

    def ordered(self) -> np.ndarray:
        """Rows oldest first."""
        return np.concatenate([self.storage[self.cursor:], self.storage[:self.cursor]])

    def snapshot(self) -> np.ndarray:
        return self.storage.copy()

    def mean_pairwise_cosine(self) -> float:
        sims = self.storage @ self.storage.T
        m = self.capacity
        return float((sims.sum() - np.trace(sims)) / (m * (m - 1)))


def queue_init(capacity: int, dim: int, rng: np.random.Generator,
               validate: bool = False) -> EmbeddingQueue:
    """Queue pre-filled with random unit vectors so the loss is defined at step 0."""
    if capacity < 1:
        raise ValueError(f"queue capacity must be >= 1, got {capacity}")
    rows = rng.normal(size=(capacity, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return EmbeddingQueue(capacity, dim, storage=rows, validate=validate)


def queue_push(queue: EmbeddingQueue, batch: np.ndarray):
    queue.push(batch)


def qmatch_loss(z_student: Tensor, z_teacher, queue: EmbeddingQueue,
                config: QMatchConfig) -> Tensor:
    """Mean cross-entropy H(p_teacher, p_student) over the batch.

    Inputs must already be L2-normalized; the teacher side is detached so
    gradients flow only through z_student.
    """
    z_t = z_teacher.detach() if isinstance(z_teacher, Tensor) else Tensor(z_teacher)
    if z_student.shape[1] != queue.dim:
        raise ValueError(f"embedding dim {z_student.shape[1]} != queue dim {queue.dim}")
    q_t = Tensor(queue.storage.T.copy())  # detached history: no gradient into Q
    p_s = softmax_rows(z_student @ q_t, temperature=config.tau_student)
    p_t = softmax_rows(z_t @ q_t, temperature=config.tau_teacher)
    return cross_entropy_rows(p_t, p_s)


def teacher_entropy(z_teacher: np.ndarray, queue: EmbeddingQueue,
                    tau_teacher: float, eps_log: float = 1e-12) -> float:
    """Mean row entropy of the teacher distribution (loss lower bound)."""
    logits = (z_teacher @ queue.storage.T) / tau_teacher
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    return float(-(p * np.log(p + eps_log)).sum(axis=1).mean())


def training_step(x: np.ndarray, pool: np.ndarray | None,
                  student: ModelParams, ema: EmaParams, queue: EmbeddingQueue,
                  corruption: CorruptionConfig, config: QMatchConfig,
                  optimizer, rng: np.random.Generator,
                  preprocess=None) -> float:
    """One full update: views -> forwards -> loss -> step -> EMA -> queue push.

    The loss uses the pre-push queue, so a sample's own teacher embedding is
    never part of the support during its step.  `preprocess` maps a raw view
    to the model-input representation (identity when None).
    """
    student_view, teacher_view = make_views(x, pool, corruption, rng)
    if preprocess is not None:
        student_view = preprocess(student_view)
        teacher_view = preprocess(teacher_view)

    h_t = encoder_forward(ema.params, Tensor(teacher_view), mode="eval")
    z_t = l2_normalize_rows(projector_forward(ema.params, h_t)).detach()

    h_s = encoder_forward(student, Tensor(student_view), mode="train")
    z_s = l2_normalize_rows(projector_forward(student, h_s))

    loss = qmatch_loss(z_s, z_t, queue, config)
    student.zero_grad()
    backward(loss)
    optimizer.step()
    ema_update(ema, student)
    queue.push(z_t.data)
    return float(loss.data)
