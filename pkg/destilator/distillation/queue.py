"""
Vrsta FIFO z vložitvami učitelja ter porazdelitvi podobnosti učitelja in
študenta nad njo.
"""
from dataclasses import dataclass

import numpy as np
from tensors import ops
from tensors.autodiff import Tensor

# dovoljeno odstopanje norme vložitev v vrsti
UNIT_TOLERANCE = 1e-3
SIMILARITY_MODES = ("consistent", "as_written")


class QueueError(ValueError):
    pass


class SimilarityError(ValueError):
    pass


class ProtocolViolation(AssertionError):
    pass


class MemoryQueue:
    """
    Krožni medpomnilnik s kapaciteto K. Vložitve se dodajajo v vrstnem redu
    paketa, ko je vrsta polna, izpade najstarejša.
    """

    def __init__(self, capacity, dim):
        if capacity < 1 or dim < 1:
            raise QueueError(f"queue needs positive capacity and dim, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.cursor = 0
        self.count = 0

    def __len__(self):
        return self.count

    @property
    def full(self):
        return self.count == self.capacity

    @property
    def fill(self):
        return self.count / self.capacity

    def enqueue(self, vectors):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1:] != (self.dim,):
            raise QueueError(f"expected vectors of dim {self.dim}, got shape {vectors.shape}")
        deviation = np.abs(np.linalg.norm(vectors, axis=1) - 1.0)
        if np.any(deviation > UNIT_TOLERANCE):
            raise QueueError(
                f"queue entries must be unit vectors (max deviation {deviation.max():.3g})"
            )
        for vector in vectors:
            self.buffer[self.cursor] = vector
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def snapshot(self):
        """Kopija vsebine od najstarejše do najnovejše vložitve."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def state(self):
        return {"buffer": self.buffer.copy(), "cursor": self.cursor, "count": self.count}

    @classmethod
    def from_state(cls, buffer, cursor, count):
        buffer = np.asarray(buffer, dtype=np.float64)
        if buffer.ndim != 2:
            raise QueueError(f"queue buffer must be 2-d, got shape {buffer.shape}")
        queue = cls(*buffer.shape)
        if not 0 <= cursor < queue.capacity or not 0 <= count <= queue.capacity:
            raise QueueError(f"invalid queue cursor {cursor} or count {count}")
        queue.buffer = buffer.copy()
        queue.cursor = int(cursor)
        queue.count = int(count)
        return queue


def enqueue_batch(queue: MemoryQueue, teacher_embeddings):
    queue.enqueue(teacher_embeddings)


@dataclass(eq=False)
class SimilarityDistribution:
    probs: Tensor
    temperature: float
    mode: str = "consistent"

    def __len__(self):
        return self.probs.shape[-1]


def _entries(queue, temperature):
    if temperature <= 0:
        raise SimilarityError(f"temperature must be positive, got {temperature}")
    entries = queue.snapshot() if isinstance(queue, MemoryQueue) else np.asarray(queue)
    if len(entries) == 0:
        raise SimilarityError("similarity over an empty queue")
    return entries


def _teacher_logits(t, entries, temperature):
    return np.asarray(t, dtype=np.float64) @ (entries.T / temperature)


def teacher_similarity(t, queue, temperature):
    """P^T: softmax po vrsti nad t . q_j / tau, brez gradienta."""
    entries = _entries(queue, temperature)
    logits = Tensor(_teacher_logits(t, entries, temperature))
    return SimilarityDistribution(ops.softmax(logits, axis=-1), temperature)


def student_similarity(s, t, queue, temperature, mode="consistent"):
    """
    P^S. V načinu "consistent" je imenovalec vsota študentovih števcev, v načinu
    "as_written" pa vsota exp(t . q_k / tau) kot v izvirnem zapisu; tedaj se
    verjetnosti ne seštejejo nujno v 1.
    """
    if mode not in SIMILARITY_MODES:
        raise SimilarityError(f"unknown similarity mode {mode!r}")
    entries = _entries(queue, temperature)
    s = s if isinstance(s, Tensor) else Tensor(s)
    single = s.ndim == 1
    if single:
        s, t = s.reshape(1, -1), np.atleast_2d(t)
    logits = s @ Tensor(entries.T / temperature)
    if mode == "consistent":
        probs = ops.softmax(logits, axis=-1)
    else:
        teacher_logits = _teacher_logits(t, entries, temperature)
        shift = teacher_logits.max(axis=-1, keepdims=True)
        denominator = np.exp(teacher_logits - shift).sum(axis=-1, keepdims=True)
        probs = ops.exp(logits - shift) / denominator
    return SimilarityDistribution(probs[0] if single else probs, temperature, mode)


class StepProtocol:
    """Zaporedje faz enega koraka; vsako odstopanje sproži ProtocolViolation."""

    PHASES = (
        "augment",
        "teacher",
        "student",
        "feature_loss",
        "enqueue",
        "teacher_similarity",
        "student_similarity",
        "similarity_loss",
        "update",
    )

    def __init__(self):
        self.position = len(self.PHASES)
        self.mask_checksum = None

    def begin(self):
        if self.position not in (0, len(self.PHASES)):
            raise ProtocolViolation(
                f"new step started during phase {self.PHASES[self.position - 1]!r}"
            )
        self.position = 0
        self.mask_checksum = None

    def enter(self, phase):
        expected = self.PHASES[self.position] if self.position < len(self.PHASES) else None
        if phase != expected:
            raise ProtocolViolation(f"phase {phase!r} entered, expected {expected!r}")
        self.position += 1

    def teacher_mask(self, hierarchy):
        """Zapomni si hierarhijo mask, iz katere dobi masko učitelj."""
        self.mask_checksum = hierarchy.checksum()
        return hierarchy.grid

    def check_student_mask(self, hierarchy):
        if self.mask_checksum is None:
            raise ProtocolViolation("student masks checked before the teacher received one")
        if hierarchy.checksum() != self.mask_checksum:
            raise ProtocolViolation("teacher and student received different mask hierarchies")
        return hierarchy

    @property
    def complete(self):
        return self.position == len(self.PHASES)
