"""Frame and sequence losses, their logit gradients and curvature products.

All per-frame quantities are (T, K) arrays.  Output-layer curvature products
take R(a_out) = J v for every frame and return the vector that is fed back
through backprop in place of the loss gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lattice as lat_mod
from .lattice import LatticeError, log_softmax

LOSS_KINDS = ("ce", "mmi", "mpe")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mpe"
    kappa: float = 1.0
    prior: str = "estimated"  # "estimated" from training alignments, or "uniform"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.kappa > 0:
            raise ValueError("acoustic scale kappa must be positive")
        if self.prior not in ("estimated", "uniform"):
            raise ValueError(f"unknown prior policy {self.prior!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# --------------------------------------------------------------------------
# cross entropy


def ce_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    T, K = logits.shape
    if labels.shape != (T,):
        raise ValueError(f"need {T} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"label out of range [0, {K})")
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(T), labels].sum())
    grad = np.exp(logp)
    grad[np.arange(T), labels] -= 1.0
    return loss, grad


def ce_output_hessian_product(y: np.ndarray, R: np.ndarray) -> np.ndarray:
    """(diag(y) - y y^T) R, frame by frame."""
    return y * R - y * np.sum(y * R, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# sequence losses


def mbr_output_hessian_product(gamma: np.ndarray, gamma_mpe: np.ndarray, R: np.ndarray,
                               kappa: float) -> np.ndarray:
    """kappa^2 * gamma (.) R - kappa^2 * gamma_mpe * (gamma . R)."""
    k2 = kappa * kappa
    return k2 * gamma * R - k2 * gamma_mpe * np.sum(gamma * R, axis=-1, keepdims=True)


def fisher_output_product(gamma_mmi: np.ndarray, R: np.ndarray, kappa: float) -> np.ndarray:
    """kappa^2 * gamma_mmi * (gamma_mmi . R): rank-one per frame."""
    return kappa * kappa * gamma_mmi * np.sum(gamma_mmi * R, axis=-1, keepdims=True)


@dataclass
class OccupancyStats:
    """Per-utterance loss, logit gradient and the occupancies behind them."""

    kind: str
    kappa: float
    loss: float
    output_grad: np.ndarray
    gamma: np.ndarray  # posterior used by the GN curvature (softmax for CE, den otherwise)
    gamma_num: np.ndarray
    gamma_den: np.ndarray | None
    gamma_mmi: np.ndarray
    gamma_mpe: np.ndarray | None = None
    mpe_acc: float | None = None  # expected correctness c_avg
    num_ref_phones: int = 0

    def gn_product(self, R: np.ndarray) -> np.ndarray:
        """Output-layer Gauss-Newton product used by HF."""
        if self.kind == "ce":
            return ce_output_hessian_product(self.gamma, R)
        if self.kind == "mpe":
            return mbr_output_hessian_product(self.gamma, self.gamma_mpe, R, self.kappa)
        # MMI: frame-local covariance of the denominator state posterior
        return self.kappa ** 2 * ce_output_hessian_product(self.gamma, R)

    def fisher_product(self, R: np.ndarray) -> np.ndarray:
        """Output-layer empirical Fisher product used by NG."""
        return fisher_output_product(self.gamma_mmi, R, self.kappa)


def _check_cover(lattice, T):
    if lattice.nodes[lattice.start] != 0 or lattice.num_frames != T:
        raise LatticeError(f"{lattice.utt_id}: lattice covers frames "
                           f"[{lattice.nodes[lattice.start]}, "
                           f"{lattice.nodes[lattice.end]}) but the utterance has {T}")


def _lattice_pass(lattice, log_post, log_priors, kappa):
    _check_cover(lattice, log_post.shape[0])
    scores = lat_mod.acoustic_scores(lattice, log_post, log_priors, kappa)
    return lat_mod.forward_backward(lattice, scores)


def _num_den_passes(utt, logits, cfg, log_priors):
    log_post = log_softmax(logits)
    K = log_post.shape[1]
    num = _lattice_pass(utt.num, log_post, log_priors, cfg.kappa)
    den = _lattice_pass(utt.den, log_post, log_priors, cfg.kappa)
    g_num = lat_mod.state_occupancy(utt.num, num.gamma, K)
    g_den = lat_mod.state_occupancy(utt.den, den.gamma, K)
    return num, den, g_num, g_den


def mmi_loss_and_occupancy(utt, logits: np.ndarray, cfg: LossConfig,
                           log_priors: np.ndarray) -> OccupancyStats:
    """MMI loss -(log Z_num - log Z_den) and its occupancies.

    The logit gradient is -kappa * (gamma_num - gamma_den).
    """
    num, den, g_num, g_den = _num_den_passes(utt, logits, cfg, log_priors)
    g_mmi = g_num - g_den
    return OccupancyStats(
        kind="mmi", kappa=cfg.kappa, loss=-(num.log_z - den.log_z),
        output_grad=-cfg.kappa * g_mmi, gamma=g_den, gamma_num=g_num, gamma_den=g_den,
        gamma_mmi=g_mmi, num_ref_phones=len(utt.reference),
    )


def mpe_loss_and_occupancy(utt, logits: np.ndarray, cfg: LossConfig,
                           log_priors: np.ndarray) -> OccupancyStats:
    """MPE loss n_ref - c_avg (expected phone inaccuracy) on the denominator lattice.

    gamma_mpe[t, k] sums gamma_q * (c_q - c_avg) over arcs aligning frame t
    to state k; the logit gradient is -kappa * gamma_mpe.
    """
    num, den, g_num, g_den = _num_den_passes(utt, logits, cfg, log_priors)
    corr = lat_mod.arc_correctness(utt.den, utt.reference)
    stats = lat_mod.mpe_stats(utt.den, den, corr)
    g_mpe = lat_mod.state_occupancy(utt.den, stats.gamma * (stats.c_q - stats.c_avg),
                                    g_den.shape[1])
    return OccupancyStats(
        kind="mpe", kappa=cfg.kappa, loss=len(utt.reference) - stats.c_avg,
        output_grad=-cfg.kappa * g_mpe,
        gamma=g_den, gamma_num=g_num, gamma_den=g_den, gamma_mmi=g_num - g_den,
        gamma_mpe=g_mpe, mpe_acc=stats.c_avg, num_ref_phones=len(utt.reference),
    )


def ce_stats(utt, logits: np.ndarray, cfg: LossConfig) -> OccupancyStats:
    loss, grad = ce_loss_and_grad(logits, utt.labels)
    y = softmax(logits)
    onehot = np.zeros_like(y)
    onehot[np.arange(len(utt.labels)), utt.labels] = 1.0
    # with kappa = 1 the "MMI occupancy" of frame-level training is onehot - y
    return OccupancyStats(
        kind="ce", kappa=1.0, loss=loss, output_grad=grad, gamma=y,
        gamma_num=onehot, gamma_den=None, gamma_mmi=onehot - y,
        num_ref_phones=len(utt.reference),
    )


def utterance_stats(utt, logits: np.ndarray, cfg: LossConfig,
                    log_priors: np.ndarray) -> OccupancyStats:
    if cfg.kind == "ce":
        return ce_stats(utt, logits, cfg)
    if cfg.kind == "mmi":
        return mmi_loss_and_occupancy(utt, logits, cfg, log_priors)
    return mpe_loss_and_occupancy(utt, logits, cfg, log_priors)


def utterance_loss(utt, logits: np.ndarray, cfg: LossConfig,
                   log_priors: np.ndarray) -> tuple[float, float]:
    """Loss value only (and expected correctness for MPE, else nan).

    Runs forward-only lattice passes where possible; this is the hot path of
    candidate evaluation.
    """
    log_post = log_softmax(logits)
    if cfg.kind == "ce":
        return -float(log_post[np.arange(len(utt.labels)), utt.labels].sum()), float("nan")
    if cfg.kind == "mmi":
        scores = []
        for lattice in (utt.num, utt.den):
            _check_cover(lattice, log_post.shape[0])
            scores.append(lat_mod.lattice_log_z(
                lattice, lat_mod.acoustic_scores(lattice, log_post, log_priors, cfg.kappa)))
        return -(scores[0] - scores[1]), float("nan")
    den = _lattice_pass(utt.den, log_post, log_priors, cfg.kappa)
    corr = lat_mod.arc_correctness(utt.den, utt.reference)
    c_avg = lat_mod.mpe_stats(utt.den, den, corr).c_avg
    return len(utt.reference) - c_avg, c_avg
