"""Linear conjugate gradient with curvature products supplied as callbacks.

``cg_run`` minimises the quadratic model

    g(d) = 0.5 * d^T B d - d^T b

starting from d = 0 and records every iterate as a candidate update.  With
``b = -grad`` this is the usual truncated-Newton inner solve.  Two
modifications are built in:

* stabilisation: each product B v is evaluated as (1/s) B(s v) with
  s = ||theta|| / ||v||, so the directional derivative is taken along a
  vector of the same magnitude as the parameters;
* preconditioning by parameter share counts: the residual is divided by
  the count of each parameter (M = diag(c)), i.e. symmetric scaling of the
  system by sqrt(c).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

ApplyB = Callable[[np.ndarray], np.ndarray]


@dataclass
class CGConfig:
    max_iters: int = 8
    damping: float = 0.0  # Tikhonov: B + damping * I
    stabilize: bool = True
    precondition: bool | None = None  # None: on when any share count exceeds 1
    eval_every: int = 1
    tol: float = 1e-12  # stop once ||r|| <= tol * ||b||

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class UpdateCandidate:
    index: int  # CG iteration m that produced delta_m (1-based)
    delta: np.ndarray
    qmodel: float
    eval_loss: float | None = None


@dataclass
class CGResult:
    candidates: list[UpdateCandidate]
    trace: list[dict] = field(default_factory=list)
    stop_reason: str = "max_iters"
    directions: list[np.ndarray] = field(default_factory=list)

    @property
    def curvature_failure(self) -> bool:
        return self.stop_reason in ("negative_curvature", "non_finite")


def precondition(vec: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return vec / counts


def stabilized_product(apply_B_raw: ApplyB, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """B v evaluated along the rescaled direction (||theta|| / ||v||) v."""
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(v, dtype=np.float64)
    theta_norm = float(np.linalg.norm(np.asarray(theta, dtype=np.float64)))
    if theta_norm == 0.0:
        return apply_B_raw(v)
    s = theta_norm / v_norm
    return apply_B_raw(s * v) / s


def quadratic_model(delta: np.ndarray, B_delta: np.ndarray, b: np.ndarray) -> float:
    return float(0.5 * delta @ B_delta - delta @ b)


def cg_run(b: np.ndarray, apply_B: ApplyB, counts: np.ndarray | None = None,
           cfg: CGConfig | None = None, theta: np.ndarray | None = None,
           keep_directions: bool = False) -> CGResult:
    """Run up to ``cfg.max_iters`` CG iterations on B d = b.

    Stops early, keeping the candidates found so far, on non-positive
    curvature v^T B v <= 0, non-finite values, or a vanished residual.
    """
    cfg = cfg or CGConfig()
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise FloatingPointError("CG right-hand side is not finite")
    use_pc = counts is not None and (
        cfg.precondition if cfg.precondition is not None else bool(np.any(counts > 1)))
    minv = (lambda x: precondition(x, counts)) if use_pc else (lambda x: x)

    def product(v):
        if cfg.stabilize and theta is not None:
            Bv = stabilized_product(apply_B, v, theta)
        else:
            Bv = apply_B(v)
        Bv = np.asarray(Bv, dtype=np.float64)
        if cfg.damping:
            Bv = Bv + cfg.damping * v
        return Bv

    result = CGResult(candidates=[])
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        result.stop_reason = "converged"
        return result
    delta = np.zeros_like(b)
    r = b.copy()
    z = minv(r)
    v = z.copy()
    rz = float(r @ z)
    for m in range(cfg.max_iters):
        Bv = product(v)
        curv = float(v @ Bv)
        if keep_directions:
            result.directions.append(v.copy())
        if not (np.all(np.isfinite(Bv)) and math.isfinite(curv)):
            result.stop_reason = "non_finite"
            log.warning("CG iteration %d: non-finite curvature product", m)
            break
        if curv <= 0.0:
            result.stop_reason = "negative_curvature"
            log.info("CG iteration %d: non-positive curvature %.3e", m, curv)
            break
        alpha = rz / curv
        delta = delta + alpha * v
        r = r - alpha * Bv
        z = minv(r)
        rz_new = float(r @ z)
        res_norm = float(np.linalg.norm(r))
        # r tracks b - B delta, so g(delta) = -0.5 delta^T (b + r)
        qm = float(-0.5 * delta @ (b + r))
        result.candidates.append(UpdateCandidate(index=m + 1, delta=delta.copy(), qmodel=qm))
        beta = rz_new / rz if rz != 0.0 else 0.0
        result.trace.append({"iteration": m + 1, "alpha": alpha, "beta": beta,
                             "res_norm": res_norm, "qmodel": qm, "curvature": curv})
        if res_norm <= cfg.tol * b_norm or rz_new == 0.0:
            result.stop_reason = "converged"
            break
        v = z + beta * v
        rz = rz_new
    return result


def eval_schedule(n: int, every: int) -> list[int]:
    """1-based candidate indices evaluated: 1, 1+every, ... and always n."""
    idx = list(range(1, n + 1, every))
    if idx[-1] != n:
        idx.append(n)
    return idx


def select_update(candidates: list[UpdateCandidate], evaluate: Callable[[np.ndarray], float],
                  every: int = 1) -> UpdateCandidate | None:
    """Evaluate scheduled candidates and return the one with the lowest loss.

    Ties go to the earlier iterate.  Returns None when no evaluation is
    finite.  A single candidate is returned without evaluation.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) == 1:
        return candidates[0]
    best = None
    for i in eval_schedule(len(candidates), every):
        cand = candidates[i - 1]
        cand.eval_loss = float(evaluate(cand.delta))
        if not math.isfinite(cand.eval_loss):
            continue
        if best is None or cand.eval_loss < best.eval_loss:
            best = cand
    return best
