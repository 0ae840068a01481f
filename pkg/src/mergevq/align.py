"""Global [CLS] alignment against a frozen teacher.

The teacher is a fixed random projection; the student's [CLS] surrogate is
the mean of its merged tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream, as_matrix, softmax

STUDENT_EPS = 1e-7
_SUM_TOL = 1e-4


@dataclass(frozen=True)
class StubTeacher:
    projection: np.ndarray  # embed_dim x classes
    temperature: float = 1.0

    @classmethod
    def init(cls, embed_dim: int, classes: int, rng: RandomStream, temperature: float = 1.0):
        proj = rng.matrix(embed_dim, classes, 1.0 / math.sqrt(embed_dim))
        proj.setflags(write=False)
        return cls(proj, temperature)

    def distribution(self, tokens) -> np.ndarray:
        return cls_distribution(tokens, self.projection, self.temperature)


def cls_distribution(tokens, projection, temperature: float = 1.0) -> np.ndarray:
    t = as_matrix(tokens, "tokens")
    if t.shape[0] == 0:
        raise ValueError("cls_distribution: no tokens")
    pooled = t.astype(np.float64).mean(axis=0)
    return softmax(pooled @ np.asarray(projection, dtype=np.float64), temperature)


def _check_pair(student, teacher):
    s = np.asarray(student, dtype=np.float64).ravel()
    t = np.asarray(teacher, dtype=np.float64).ravel()
    if s.shape != t.shape:
        raise ValueError(f"align_loss: lengths {s.size} and {t.size} differ")
    for name, p in (("student", s), ("teacher", t)):
        if np.any(p < 0) or abs(p.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"align_loss: {name} is not a probability distribution")
    return s, t


def cross_entropy(student, teacher) -> float:
    """``-sum_c teacher_c log max(student_c, eps)`` without input validation."""
    s = np.asarray(student, dtype=np.float64).ravel()
    t = np.asarray(teacher, dtype=np.float64).ravel()
    return float(-(t * np.log(np.maximum(s, STUDENT_EPS))).sum())


def align_loss(student, teacher) -> float:
    s, t = _check_pair(student, teacher)
    return cross_entropy(s, t)


def align_loss_grad(student, teacher) -> np.ndarray:
    s, t = _check_pair(student, teacher)
    return np.where(s < STUDENT_EPS, 0.0, -t / np.maximum(s, STUDENT_EPS))


def two_views(tokens, rng: RandomStream, noise: float = 0.1):
    """Two independently perturbed copies of ``tokens`` (augmentation stand-in)."""
    t = as_matrix(tokens, "tokens")
    return t + rng.matrix(*t.shape, noise), t + rng.matrix(*t.shape, noise)


def align_demo(seed: int = 0, tokens: int = 16, embed_dim: int = 32, classes: int = 10) -> dict:
    rng = RandomStream(seed)
    teacher = StubTeacher.init(embed_dim, classes, rng.child(1))
    student_proj = rng.child(2).matrix(embed_dim, classes, 1.0 / math.sqrt(embed_dim))
    u, v = two_views(rng.child(3).matrix(tokens, embed_dim), rng.child(4))
    p_teacher = teacher.distribution(v)
    p_student = cls_distribution(u, student_proj)
    uniform = np.full(classes, 1.0 / classes)
    return {
        "seed": seed,
        "classes": classes,
        "loss": align_loss(p_student, p_teacher),
        "self_loss": align_loss(p_teacher, p_teacher),
        "uniform_loss": align_loss(uniform, uniform),
        "teacher_argmax": int(np.argmax(p_teacher)),
        "student_argmax": int(np.argmax(p_student)),
    }
