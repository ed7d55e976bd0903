"""Optimisers (SGD, Adam, HF, NG, NGHF) and the per-epoch update driver.

Second-order updates follow the two-stage pattern: a gradient accumulation
stage over a large gradient batch, then a CG stage whose curvature products
are averaged over a small CG batch sampled from the whole training set.
Every CG iterate is a candidate update; the one with the lowest loss on the
CG batch (or on held-out data) is applied.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .cg import CGConfig, CGResult, UpdateCandidate, cg_run, precondition, select_update
from .distrib import WorkerPool, WorkItem, WorkerResult
from .loss import LossConfig, utterance_loss, utterance_stats
from .model import ModelSpec, backprop, forward, r_forward, share_counts

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam", "hf", "ng", "nghf")
SECOND_ORDER = ("hf", "ng", "nghf")
MAX_FAILED_FRACTION = 0.1


class UpdateAborted(RuntimeError):
    """Too many utterances of a gradient batch failed."""


@dataclass
class OptimizerConfig:
    kind: str = "nghf"
    learning_rate: float = 0.01  # SGD/Adam step; step length of the gradient fallback
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ng_lambda: float = 1.0
    inner_ng_iters: int = 4
    cg: CGConfig = field(default_factory=CGConfig)
    updates_per_epoch: int = 8
    gradient_batch_size: int = 0  # 0: the epoch is split into updates_per_epoch batches
    cg_batch_size: int = 8
    minibatch_size: int = 1  # SGD/Adam utterances per step
    select_on: str = "cg_batch"  # or "heldout"
    ng_curvature: str = "fisher"  # "gn" swaps NG's system to the GN matrix (ablation)
    report_after: bool = True

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        for name in ("updates_per_epoch", "cg_batch_size", "minibatch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gradient_batch_size < 0:
            raise ValueError("gradient_batch_size must be >= 0")
        if self.inner_ng_iters < 0:
            raise ValueError("inner_ng_iters must be >= 0")
        if not self.ng_lambda > 0:
            raise ValueError("ng_lambda must be positive")
        if self.select_on not in ("cg_batch", "heldout"):
            raise ValueError("select_on must be 'cg_batch' or 'heldout'")
        if self.ng_curvature not in ("fisher", "gn"):
            raise ValueError("ng_curvature must be 'fisher' or 'gn'")


@dataclass
class UpdateReport:
    epoch: int
    update: int
    optimizer: str
    train_loss: float
    train_loss_after: float = math.nan
    cg_batch_loss: float = math.nan
    baseline_loss: float = math.nan
    valid_metric: float = math.nan
    cg_iters: int = 0
    chosen_m: int = 0
    stop_reason: str = ""
    failed: bool = False
    flags: list[str] = field(default_factory=list)
    skipped_utts: int = 0
    grad_norm: float = 0.0
    step_norm: float = 0.0
    ng_projection: float = math.nan
    train_mpe_acc: float = math.nan
    wall_ms_grad: float = 0.0
    wall_ms_cg: float = 0.0
    wall_ms_eval: float = 0.0
    wall_ms_rforward: float = 0.0
    wall_ms_ebp: float = 0.0
    wall_ms_stats: float = 0.0
    trace: list[dict] = field(default_factory=list)


@dataclass
class TrainContext:
    model: ModelSpec
    loss: LossConfig
    log_priors: np.ndarray
    pool: WorkerPool = field(default_factory=WorkerPool)
    heldout: list | None = None


# --------------------------------------------------------------------------
# worker functions (module level so they pickle)


def _mpe_fields(stats_loss_kind, c_avg, n_ref):
    if stats_loss_kind == "mpe" and c_avg is not None and math.isfinite(c_avg):
        return {"mpe_acc": float(c_avg), "ref_phones": float(n_ref)}
    return {}


def _gradient_work(item, cache, *, model, params, loss_cfg, log_priors):
    utt = item.payload
    t0 = time.perf_counter()
    tape = forward(model, params, utt.features)
    st = utterance_stats(utt, tape.logits, loss_cfg, log_priors)
    grad = backprop(model, params, tape, st.output_grad)
    return WorkerResult(vector=grad, loss=st.loss, count=1,
                        stats=_mpe_fields(st.kind, st.mpe_acc, st.num_ref_phones),
                        timings={"grad": time.perf_counter() - t0})


def _curvature_work(item, cache, *, model, params, loss_cfg, log_priors, token, v, which):
    utt = item.payload
    key = (token, utt.utt_id)
    timings = {"stats": 0.0}
    if key not in cache:
        for stale in [k for k in cache if k[0] != token]:
            del cache[stale]
        t0 = time.perf_counter()
        tape = forward(model, params, utt.features)
        cache[key] = (tape, utterance_stats(utt, tape.logits, loss_cfg, log_priors))
        timings["stats"] += time.perf_counter() - t0
    tape, st = cache[key]
    t0 = time.perf_counter()
    R = r_forward(model, params, tape, v)
    t1 = time.perf_counter()
    out = st.gn_product(R) if which == "gn" else st.fisher_product(R)
    t2 = time.perf_counter()
    vec = backprop(model, params, tape, out)
    t3 = time.perf_counter()
    timings["rforward"] = t1 - t0
    timings["stats"] += t2 - t1
    timings["ebp"] = t3 - t2
    return WorkerResult(vector=vec, count=1, timings=timings)


def _loss_work(item, cache, *, model, params, loss_cfg, log_priors, metrics=False):
    utt = item.payload
    t0 = time.perf_counter()
    tape = forward(model, params, utt.features)
    loss, c_avg = utterance_loss(utt, tape.logits, loss_cfg, log_priors)
    stats = _mpe_fields(loss_cfg.kind, c_avg, len(utt.reference))
    if metrics:
        if loss_cfg.kind != "mpe":
            mpe_cfg = LossConfig("mpe", kappa=loss_cfg.kappa, prior=loss_cfg.prior)
            stats = _mpe_fields("mpe", utterance_loss(utt, tape.logits, mpe_cfg, log_priors)[1],
                                len(utt.reference))
        pred = np.argmax(tape.logits, axis=1)
        stats["frame_errors"] = float(np.sum(pred != utt.labels))
        stats["frames"] = float(len(utt.labels))
    return WorkerResult(loss=float(loss), count=1, stats=stats,
                        timings={"eval": time.perf_counter() - t0})


def _items(batch, kind):
    return [WorkItem(u.utt_id, u, kind) for u in batch]


# --------------------------------------------------------------------------
# gradient accumulation and loss evaluation


@dataclass
class GradientResult:
    grad: np.ndarray
    loss: float
    count: int
    failures: list
    mpe_acc: float
    seconds: float


def accumulate_gradient(ctx: TrainContext, params: np.ndarray, batch) -> GradientResult:
    """Average raw EBP gradient of the sequence loss over a batch of utterances.

    Failing utterances are skipped; more than 10% failures abort the update.
    """
    if not batch:
        raise ValueError("empty gradient batch")
    t0 = time.perf_counter()
    fn = partial(_gradient_work, model=ctx.model, params=params, loss_cfg=ctx.loss,
                 log_priors=ctx.log_priors)
    res = ctx.pool.map_reduce(_items(batch, "gradient"), fn)
    for key, msg in res.failures:
        log.warning("skipping utterance %s: %s", key, msg)
    if len(res.failures) > MAX_FAILED_FRACTION * len(batch) or res.count == 0:
        raise UpdateAborted(f"{len(res.failures)} of {len(batch)} utterances failed; "
                            f"first: {res.failures[0][1] if res.failures else 'n/a'}")
    ref = res.stats.get("ref_phones", 0.0)
    return GradientResult(
        grad=res.vector / res.count, loss=float(res.loss / res.count), count=res.count,
        failures=res.failures, mpe_acc=res.stats["mpe_acc"] / ref if ref else math.nan,
        seconds=time.perf_counter() - t0)


def batch_loss(ctx: TrainContext, params: np.ndarray, batch) -> tuple[float, WorkerResult]:
    """Mean per-utterance loss; inf if any utterance fails."""
    fn = partial(_loss_work, model=ctx.model, params=params, loss_cfg=ctx.loss,
                 log_priors=ctx.log_priors)
    res = ctx.pool.map_reduce(_items(batch, "loss"), fn)
    if res.failures or res.count == 0:
        return math.inf, res
    return float(res.loss / res.count), res


def evaluate_set(ctx: TrainContext, params: np.ndarray, utts) -> dict:
    """Loss, MPE accuracy and frame error rate over a set of utterances."""
    if not utts:
        raise ValueError("cannot evaluate an empty set")
    fn = partial(_loss_work, model=ctx.model, params=params, loss_cfg=ctx.loss,
                 log_priors=ctx.log_priors, metrics=True)
    res = ctx.pool.map_reduce(_items(utts, "loss"), fn)
    if res.failures:
        raise RuntimeError(f"evaluation failed on {len(res.failures)} utterances: "
                           f"{res.failures[0][1]}")
    ref = res.stats.get("ref_phones", 0.0)
    return {
        "loss": res.loss / res.count,
        "mpe_acc": res.stats["mpe_acc"] / ref if ref else math.nan,
        "frame_err": res.stats["frame_errors"] / res.stats["frames"],
        "utterances": res.count,
    }


# --------------------------------------------------------------------------
# first-order updates


def _apply_step(params: np.ndarray, step: np.ndarray) -> np.ndarray:
    return (params.astype(np.float64) + step).astype(params.dtype)


def sgd_update(params, grad, cfg: OptimizerConfig, velocity=None):
    """theta -= lr * v with v = momentum * v + grad.  Returns (params, velocity)."""
    grad = np.asarray(grad, dtype=np.float64)
    velocity = grad.copy() if velocity is None else cfg.momentum * velocity + grad
    return _apply_step(params, -cfg.learning_rate * velocity), velocity


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(params, grad, state: AdamState, cfg: OptimizerConfig):
    """Bias-corrected Adam step.  Returns (params, state)."""
    grad = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    step = -cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return _apply_step(params, step), AdamState(m, v, t)


# --------------------------------------------------------------------------
# second-order directions on plain callbacks


def hf_direction(grad, apply_G, counts=None, cg_cfg=None, theta=None) -> CGResult:
    """CG on G d = -grad."""
    return cg_run(-np.asarray(grad, dtype=np.float64), apply_G, counts, cg_cfg, theta)


def ng_direction(grad, apply_F, counts=None, cg_cfg=None, theta=None,
                 lam: float = 1.0) -> CGResult:
    """CG on lam * F d = -grad."""
    return cg_run(-np.asarray(grad, dtype=np.float64), _scaled(apply_F, lam), counts,
                  cg_cfg, theta)


def _scaled(apply_B, lam):
    return lambda v: lam * apply_B(v)


@dataclass
class NGHFResult:
    outer: CGResult
    inner: CGResult | None
    b: np.ndarray  # right-hand side of the outer solve (-d_NG, or -grad on fallback)
    fallback: bool


def nghf_direction(grad, apply_F, apply_G, counts=None, cg_cfg=None, theta=None,
                   inner_iters: int = 4, lam: float = 1.0) -> NGHFResult:
    """Inner CG on lam*F for the NG direction, then outer CG on G started from it.

    With ``inner_iters == 0`` this is exactly :func:`hf_direction`.
    """
    cg_cfg = cg_cfg or CGConfig()
    b = -np.asarray(grad, dtype=np.float64)
    inner, fallback = None, False
    if inner_iters > 0 and np.any(b):
        inner = cg_run(b, _scaled(apply_F, lam), counts,
                       replace(cg_cfg, max_iters=inner_iters), theta)
        if inner.candidates and np.all(np.isfinite(inner.candidates[-1].delta)):
            b = inner.candidates[-1].delta
        else:
            fallback = True
            log.warning("inner NG solve failed (%s); using the gradient", inner.stop_reason)
    return NGHFResult(outer=cg_run(b, apply_G, counts, cg_cfg, theta), inner=inner, b=b,
                      fallback=fallback)


# --------------------------------------------------------------------------
# second-order updates


_tokens = itertools.count()


def _curvature_callback(ctx, params, cg_batch, which, token, timings):
    items = _items(cg_batch, "curvature")
    n = len(items)

    def apply(v):
        fn = partial(_curvature_work, model=ctx.model, params=params, loss_cfg=ctx.loss,
                     log_priors=ctx.log_priors, token=token, v=v, which=which)
        res = ctx.pool.map_reduce(items, fn)
        if res.failures:
            raise FloatingPointError(f"curvature product failed: {res.failures[0][1]}")
        for name, val in res.timings.items():
            timings[name] = timings.get(name, 0.0) + val
        return res.vector / n

    return apply


def second_order_update(ctx: TrainContext, params: np.ndarray, gradient_batch, cg_batch,
                        cfg: OptimizerConfig, epoch: int = 0, update: int = 0
                        ) -> tuple[np.ndarray, UpdateReport]:
    """One HF / NG / NGHF update.  Returns the new parameters and the report."""
    kind = cfg.kind
    if kind not in SECOND_ORDER:
        raise ValueError(f"{kind} is not a second-order optimizer")
    gres = accumulate_gradient(ctx, params, gradient_batch)
    report = UpdateReport(epoch=epoch, update=update, optimizer=kind, train_loss=gres.loss,
                          skipped_utts=len(gres.failures), train_mpe_acc=gres.mpe_acc,
                          grad_norm=float(np.linalg.norm(gres.grad)),
                          wall_ms_grad=1e3 * gres.seconds)
    t_cg = time.perf_counter()
    counts = share_counts(ctx.model)
    token = next(_tokens)
    worker_t: dict[str, float] = {}
    apply_G = _curvature_callback(ctx, params, cg_batch, "gn", token, worker_t)
    apply_F = _curvature_callback(ctx, params, cg_batch, "fisher", token, worker_t)
    eval_set = cg_batch
    if cfg.select_on == "heldout":
        if not ctx.heldout:
            raise ValueError("select_on='heldout' needs held-out utterances")
        eval_set = ctx.heldout
    eval_seconds = 0.0

    def evaluate(delta):
        nonlocal eval_seconds
        t0 = time.perf_counter()
        loss = batch_loss(ctx, _apply_step(params, delta), eval_set)[0]
        eval_seconds += time.perf_counter() - t0
        return loss

    theta = params.astype(np.float64)
    b_used = None
    try:
        if kind == "hf":
            result = hf_direction(gres.grad, apply_G, counts, cfg.cg, theta)
        elif kind == "ng":
            curv = apply_F if cfg.ng_curvature == "fisher" else apply_G
            result = ng_direction(gres.grad, curv, counts, cfg.cg, theta, cfg.ng_lambda)
        else:
            nres = nghf_direction(gres.grad, apply_F, apply_G, counts, cfg.cg, theta,
                                  cfg.inner_ng_iters, cfg.ng_lambda)
            result = nres.outer
            if nres.fallback:
                report.flags.append("inner_ng_failed")
            if nres.inner is not None and not nres.fallback:
                b_used = nres.b
    except FloatingPointError as exc:
        log.warning("update %d: curvature evaluation failed: %s", update, exc)
        result = CGResult(candidates=[], stop_reason="non_finite")

    report.cg_iters = len(result.candidates)
    report.stop_reason = result.stop_reason
    report.trace = result.trace
    candidates = result.candidates
    if not candidates and result.curvature_failure:
        # no usable curvature at all: fall back to a (preconditioned) gradient step
        report.flags.append("gradient_fallback")
        step = -gres.grad
        if cfg.cg.precondition is not False and np.any(counts > 1):
            step = precondition(step, counts)
        candidates = [UpdateCandidate(index=0, delta=cfg.learning_rate * step,
                                      qmodel=math.nan)]

    new_params = params
    if candidates:
        baseline = evaluate(np.zeros_like(theta))
        chosen = select_update(candidates, evaluate, cfg.cg.eval_every)
        if chosen is not None and chosen.eval_loss is None:
            chosen.eval_loss = evaluate(chosen.delta)
        report.baseline_loss = baseline
        if chosen is None or not chosen.eval_loss <= baseline:
            report.failed = True
            report.cg_batch_loss = baseline
            report.flags.append("no_improving_candidate")
        else:
            report.chosen_m = chosen.index
            report.cg_batch_loss = chosen.eval_loss
            report.step_norm = float(np.linalg.norm(chosen.delta))
            if b_used is not None:
                bn = float(np.linalg.norm(b_used))
                report.ng_projection = abs(float(chosen.delta @ b_used)) / bn if bn else 0.0
            new_params = _apply_step(params, chosen.delta)
        evaluated = {c.index: c.eval_loss for c in candidates}
        for rec in report.trace:
            rec["eval_loss"] = evaluated.get(rec["iteration"])
    report.wall_ms_cg = 1e3 * (time.perf_counter() - t_cg)
    report.wall_ms_eval = 1e3 * eval_seconds
    report.wall_ms_rforward = 1e3 * worker_t.get("rforward", 0.0)
    report.wall_ms_ebp = 1e3 * worker_t.get("ebp", 0.0)
    report.wall_ms_stats = 1e3 * worker_t.get("stats", 0.0)
    if cfg.report_after:
        report.train_loss_after = batch_loss(ctx, new_params, gradient_batch)[0]
    return new_params, report


def hf_update(ctx, params, gradient_batch, cg_batch, cfg, **kw):
    return second_order_update(ctx, params, gradient_batch, cg_batch, replace(cfg, kind="hf"),
                               **kw)


def ng_update(ctx, params, gradient_batch, cg_batch, cfg, **kw):
    return second_order_update(ctx, params, gradient_batch, cg_batch, replace(cfg, kind="ng"),
                               **kw)


def nghf_update(ctx, params, gradient_batch, cg_batch, cfg, **kw):
    return second_order_update(ctx, params, gradient_batch, cg_batch,
                               replace(cfg, kind="nghf"), **kw)


# --------------------------------------------------------------------------
# epoch driver


class Trainer:
    """Owns parameters, optimiser state and the seeded sampling stream."""

    def __init__(self, ctx: TrainContext, params: np.ndarray, cfg: OptimizerConfig,
                 seed: int = 0, valid_every: int = 0):
        self.ctx = ctx
        self.params = params.copy()
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.valid_every = valid_every  # 0: validate at the end of each epoch only
        self.num_updates = 0
        self.velocity = None
        self.adam = AdamState.zeros(ctx.model.num_params)

    def _validate(self) -> float:
        if not self.ctx.heldout:
            return math.nan
        return evaluate_set(self.ctx, self.params, self.ctx.heldout)["mpe_acc"]

    def _partition(self, order: np.ndarray) -> list[np.ndarray]:
        cfg = self.cfg
        if cfg.kind in SECOND_ORDER:
            if cfg.gradient_batch_size:
                n_batches = math.ceil(len(order) / cfg.gradient_batch_size)
            else:
                n_batches = cfg.updates_per_epoch
        else:
            n_batches = math.ceil(len(order) / cfg.minibatch_size)
        if n_batches > len(order):
            raise ValueError(f"cannot split {len(order)} utterances into {n_batches} batches")
        return np.array_split(order, n_batches)

    def run_epoch(self, train, epoch: int = 0) -> list[UpdateReport]:
        if not train:
            raise ValueError("empty training set")
        cfg = self.cfg
        order = self.rng.permutation(len(train))
        batches = self._partition(order)
        reports = []
        for i, idx in enumerate(batches):
            batch = [train[j] for j in idx]
            self.num_updates += 1
            if cfg.kind in SECOND_ORDER:
                size = min(cfg.cg_batch_size, len(train))
                cg_batch = [train[j] for j in np.sort(self.rng.choice(len(train), size,
                                                                      replace=False))]
                self.params, rep = second_order_update(
                    self.ctx, self.params, batch, cg_batch, cfg, epoch=epoch,
                    update=self.num_updates)
            else:
                rep = self._first_order_step(batch, epoch)
            last = i == len(batches) - 1
            if last or (self.valid_every and self.num_updates % self.valid_every == 0):
                rep.valid_metric = self._validate()
            reports.append(rep)
            log.info("epoch %d update %d %s loss %.5f -> %.5f m=%d%s", epoch,
                     self.num_updates, cfg.kind, rep.train_loss, rep.cg_batch_loss,
                     rep.chosen_m, " FAILED" if rep.failed else "")
        return reports

    def _first_order_step(self, batch, epoch) -> UpdateReport:
        gres = accumulate_gradient(self.ctx, self.params, batch)
        if self.cfg.kind == "sgd":
            self.params, self.velocity = sgd_update(self.params, gres.grad, self.cfg,
                                                    self.velocity)
        else:
            self.params, self.adam = adam_update(self.params, gres.grad, self.adam, self.cfg)
        return UpdateReport(epoch=epoch, update=self.num_updates, optimizer=self.cfg.kind,
                            train_loss=gres.loss, skipped_utts=len(gres.failures),
                            train_mpe_acc=gres.mpe_acc,
                            grad_norm=float(np.linalg.norm(gres.grad)),
                            wall_ms_grad=1e3 * gres.seconds)


def run_epoch(model: ModelSpec, params: np.ndarray, train, cfg: OptimizerConfig,
              loss_cfg: LossConfig, log_priors: np.ndarray, seed: int = 0,
              pool: WorkerPool | None = None, epoch: int = 0):
    """One epoch from a fresh trainer.  Returns (params, reports)."""
    ctx = TrainContext(model, loss_cfg, log_priors, pool or WorkerPool(1))
    trainer = Trainer(ctx, params, cfg, seed)
    reports = trainer.run_epoch(train, epoch)
    return trainer.params, reports
