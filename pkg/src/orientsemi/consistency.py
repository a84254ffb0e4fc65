"""Global distribution consistency between teacher and student.

Dense pseudo-label pairs are lifted into a discrete distribution: each
sampled position contributes mass ``exp(score)`` at its class of
interest.  The teacher and student distributions are then aligned with
an entropic transport solve, evaluated in dual form (:func:`gc_loss`).

A second, noise-perturbed copy of the matching makes the alignment
contrastive: both mass vectors are jittered with Gaussian noise, the
matching is re-solved, and the two transport plans are pulled together
by a mean-squared plan-difference penalty.  The penalty itself carries
no gradient; gradients flow only through the two dual objectives.

Scenes with fewer pairs than ``global_threshold`` are gated off: the
matching is only meaningful when the distribution covers enough of the
scene, so below the threshold the loss and gradient are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from orientsemi.transport import build_cost_matrix, gc_loss

# Perturbed masses are clamped here to stay strictly positive; entries at
# the floor have zero gradient (the clamp is flat).
CLAMP_FLOOR = 1e-6


@dataclass
class GlobalDistribution:
    """Unnormalised mass at sampled positions, one atom per pair.

    ``values`` is ``exp(scores)`` for a freshly built distribution, but
    perturbed copies break that relation, so it is not enforced here;
    :func:`build_distribution` is the constructor that guarantees it.
    """

    values: np.ndarray
    positions: np.ndarray
    scores: np.ndarray
    class_index: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.class_index = np.asarray(self.class_index, dtype=np.int64)
        n = self.values.shape[0]
        if self.positions.shape != (n, 2):
            raise ValueError(f"positions must be ({n}, 2), got {self.positions.shape}")
        if self.scores.shape != (n,) or self.class_index.shape != (n,):
            raise ValueError("scores and class_index must match values in length")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0.0):
            raise ValueError("values must be finite and strictly positive")

    def __len__(self) -> int:
        return self.values.shape[0]


def build_distribution(
    positions: np.ndarray,
    score_rows: np.ndarray,
    class_index: Optional[np.ndarray] = None,
) -> GlobalDistribution:
    """Build a distribution from per-position class-score rows.

    The class of interest defaults to each row's argmax (ties resolve to
    the lowest class index); pass ``class_index`` to pin it externally,
    e.g. to evaluate the student at the teacher's classes.  Mass is
    ``exp(score)`` at the chosen class.
    """
    positions = np.asarray(positions, dtype=np.float64)
    score_rows = np.asarray(score_rows, dtype=np.float64)
    if score_rows.ndim != 2 or score_rows.shape[0] != positions.shape[0]:
        raise ValueError(
            f"score_rows shape {score_rows.shape} does not match {positions.shape[0]} positions"
        )
    if class_index is None:
        class_index = np.argmax(score_rows, axis=1)
    else:
        class_index = np.asarray(class_index, dtype=np.int64)
        if np.any(class_index < 0) or np.any(class_index >= score_rows.shape[1]):
            raise ValueError("class_index out of range")
    scores = score_rows[np.arange(score_rows.shape[0]), class_index]
    return GlobalDistribution(
        values=np.exp(scores),
        positions=positions,
        scores=scores,
        class_index=class_index,
    )


def perturb(dist: GlobalDistribution, beta: float, rng: np.random.Generator) -> GlobalDistribution:
    """Additive Gaussian jitter on the mass values, clamped positive.

    ``beta == 0`` returns the input distribution unchanged (same arrays,
    no rng draw), so the noise-free path is bit-identical to no noise.
    """
    if beta < 0.0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if beta == 0.0:
        return dist
    noise = rng.standard_normal(len(dist))
    values = np.maximum(dist.values + beta * noise, CLAMP_FLOOR)
    return replace(dist, values=values)


@dataclass
class NgcConfig:
    epsilon: float = 0.1
    max_iters: int = 1000
    tolerance: float = 1e-6
    beta: float = 0.3
    global_threshold: int = 150
    plan_weighting: str = "none"

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.global_threshold < 0:
            raise ValueError(f"global_threshold must be >= 0, got {self.global_threshold}")
        if self.plan_weighting not in ("none", "student_mass"):
            raise ValueError(f"unknown plan_weighting {self.plan_weighting!r}")


@dataclass
class NgcResult:
    """Loss value, gradient with respect to the student mass vector, and
    the term breakdown.  A gated result is all zeros."""

    loss: float
    grad_values: np.ndarray
    gated: bool
    loss_gc: float
    loss_gc_noisy: float
    loss_plan: float
    diagnostics: dict


def plan_divergence(
    plan: np.ndarray,
    noisy_plan: np.ndarray,
    student_hat: np.ndarray,
    weighting: str = "none",
) -> float:
    """Mean squared difference between two transport plans.

    With ``student_mass`` weighting, each column's squared difference is
    scaled by the student's normalised mass times the column count, so a
    uniform student reduces to the unweighted mean.
    """
    diff = plan - noisy_plan
    sq = diff * diff
    if weighting == "student_mass":
        sq = sq * (student_hat[None, :] * student_hat.shape[0])
    elif weighting != "none":
        raise ValueError(f"unknown plan weighting {weighting!r}")
    return float(sq.mean())


def ngc_loss(
    teacher: GlobalDistribution,
    student: GlobalDistribution,
    config: NgcConfig,
    rng: np.random.Generator,
) -> NgcResult:
    """Noise-contrasted global consistency loss.

    The two distributions must pair position-for-position.  The rng is
    consumed only for the noise draws (teacher first, then student), so
    a caller that seeds it per step gets reproducible noise.
    """
    n = len(teacher)
    if len(student) != n:
        raise ValueError(f"teacher has {n} pairs, student has {len(student)}")
    if not np.array_equal(teacher.positions, student.positions):
        raise ValueError("teacher and student must be sampled at identical positions")
    if n < config.global_threshold:
        return NgcResult(
            loss=0.0,
            grad_values=np.zeros(n),
            gated=True,
            loss_gc=0.0,
            loss_gc_noisy=0.0,
            loss_plan=0.0,
            diagnostics={"n_pairs": n},
        )

    cost = build_cost_matrix(
        teacher.positions, teacher.scores, student.positions, student.scores
    )
    clean = gc_loss(
        teacher.values,
        student.values,
        cost,
        epsilon=config.epsilon,
        max_iters=config.max_iters,
        tolerance=config.tolerance,
    )

    if config.beta == 0.0:
        # No noise: the second matching is identical, the plan penalty
        # vanishes, and the loss is exactly twice the clean term.
        noisy = clean
        grad_noisy = clean.grad_student
        loss_plan = 0.0
    else:
        teacher_noisy = perturb(teacher, config.beta, rng)
        student_noisy = perturb(student, config.beta, rng)
        noisy = gc_loss(
            teacher_noisy.values,
            student_noisy.values,
            cost,
            epsilon=config.epsilon,
            max_iters=config.max_iters,
            tolerance=config.tolerance,
        )
        # Chain rule through value -> clamp(value + noise): identity where
        # the clamp is inactive, zero where it pinned the mass.
        unclamped = student_noisy.values > CLAMP_FLOOR
        grad_noisy = np.where(unclamped, noisy.grad_student, 0.0)
        student_hat = student.values / student.values.sum()
        loss_plan = plan_divergence(clean.plan, noisy.plan, student_hat, config.plan_weighting)

    loss = clean.loss + noisy.loss + loss_plan
    grad = clean.grad_student + grad_noisy
    return NgcResult(
        loss=loss,
        grad_values=grad,
        gated=False,
        loss_gc=clean.loss,
        loss_gc_noisy=noisy.loss,
        loss_plan=loss_plan,
        diagnostics={
            "n_pairs": n,
            "clean_iterations": clean.solution.iterations,
            "clean_converged": clean.solution.converged,
            "noisy_iterations": noisy.solution.iterations,
            "noisy_converged": noisy.solution.converged,
        },
    )
