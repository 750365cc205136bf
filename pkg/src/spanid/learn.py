"""Unsupervised identification of deviation ratios from one measured crossing.

The loop is plain gradient descent through the simulator: each epoch walks
the crossing in contiguous batches, each batch starts from the state the
previous batch predicted, and after every batch the optimizer moves ``k``
by the (scaled) adjoint gradient of the batch loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DivergenceError, InputError, ProfileError
from .fe_model import MIN_DEVIATION_RATIO
from .gradients import ScalingProfile, batch_bounds, scale_gradients
from .integrate import finite_difference_acceleration

logger = logging.getLogger(__name__)

FALSE_POSITIVE_THRESHOLD = 0.05
PRIOR_SOURCES = ("inspection", "drone", "fe-sensitivity")
NORMALIZATIONS = ("global", "channel", "none")


# -- losses -------------------------------------------------------------------
@dataclass(frozen=True)
class LossConfig:
    """Huber/L1 loss settings.

    ``normalize`` sets the residual scale: ``"global"`` divides each record
    type by the RMS over all its measured channels, ``"channel"`` divides every
    channel by its own RMS and ``"none"`` keeps SI units. The Huber threshold
    ``beta`` is in units of that scale.
    """

    huber_beta: float = 1.0
    displacement_weight: float = 0.9
    acceleration_weight: float = 0.1
    use_acceleration: bool = True
    l1_factor: float = 1e-3
    normalize: str = "global"

    def __post_init__(self):
        if not self.huber_beta > 0:
            raise InputError("huber_beta must be > 0")
        if self.displacement_weight < 0 or self.acceleration_weight < 0 or self.l1_factor < 0:
            raise InputError("loss weights must be >= 0")
        if self.normalize not in NORMALIZATIONS:
            raise InputError(f"normalize must be one of {NORMALIZATIONS}")


def huber_terms(diff, beta):
    """Elementwise Huber values and derivatives."""
    a = np.abs(diff)
    small = a < beta
    val = np.where(small, 0.5 * diff * diff / beta, a - 0.5 * beta)
    der = np.where(small, diff / beta, np.sign(diff))
    return val, der


def huber_loss(pred, truth, beta=1.0):
    """Mean Huber loss: ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta/2`` outside."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if not beta > 0:
        raise InputError("beta must be > 0")
    if pred.size == 0:
        return 0.0
    val, _ = huber_terms(pred - truth, beta)
    return float(val.mean())


def huber_loss_grad(pred, truth, beta=1.0):
    """Value and ``d/dpred`` of :func:`huber_loss`."""
    diff = np.asarray(pred, float) - np.asarray(truth, float)
    val, der = huber_terms(diff, beta)
    return float(val.mean()), der / diff.size


def combined_loss(l_disp, l_accel, config=LossConfig()):
    """``w_d l_disp + w_a l_accel``; a single present channel passes through."""
    if l_accel is None or not config.use_acceleration:
        if l_disp is None:
            raise InputError("no response channel to compare")
        return float(l_disp)
    if l_disp is None:
        return float(l_accel)
    return config.displacement_weight * l_disp + config.acceleration_weight * l_accel


def l1_regularizer(k, lam):
    """``lam * sum |k_i - 1|``."""
    if lam < 0:
        raise InputError("lambda must be >= 0")
    return float(lam * np.sum(np.abs(np.asarray(k, float) - 1.0)))


def l1_lambda(previous_mean_primary, factor=1e-3):
    """Regularization weight for the next epoch."""
    return factor * float(previous_mean_primary)


# -- priors -------------------------------------------------------------------
@dataclass(frozen=True)
class PriorEntry:
    member: int
    k_prior: float
    confidence: float
    source: str = "inspection"

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ProfileError(f"member {self.member}: confidence must lie in [0, 1]")
        if self.k_prior < MIN_DEVIATION_RATIO:
            raise ProfileError(f"member {self.member}: k_prior below {MIN_DEVIATION_RATIO}")
        if self.source not in PRIOR_SOURCES:
            raise ProfileError(f"member {self.member}: unknown prior source {self.source!r}")


@dataclass(frozen=True)
class PriorSpec:
    entries: tuple = ()
    scales: ScalingProfile | None = None


def apply_prior(prior, n_members, k_healthy=1.0):
    """Initial ratios ``(1 - p) k_healthy + p k_prior``; members without a prior start healthy."""
    k = np.full(n_members, float(k_healthy))
    entries = prior.entries if isinstance(prior, PriorSpec) else (prior or ())
    for e in entries:
        if not 0 <= e.member < n_members:
            raise ProfileError(f"prior for unknown member {e.member}")
        p = e.confidence
        k[e.member] = (1.0 - p) * k_healthy + p * e.k_prior
    return k


# -- optimizers ---------------------------------------------------------------
def clamp(k):
    return np.maximum(k, MIN_DEVIATION_RATIO)


class RMSprop:
    def __init__(self, n, rho=0.99, eps=1e-8):
        self.rho, self.eps = rho, eps
        self.v = np.zeros(n)

    def step(self, k, g, lr):
        _check_finite_grad(g)
        self.v = self.rho * self.v + (1.0 - self.rho) * g * g
        return clamp(k - lr * g / (np.sqrt(self.v) + self.eps))


class AdamW:
    """Adam with decoupled weight decay (default 0: decay would pull k toward 0)."""

    def __init__(self, n, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps, self.wd = eps, weight_decay
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, k, g, lr):
        _check_finite_grad(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        k = k * (1.0 - lr * self.wd)
        return clamp(k - lr * mh / (np.sqrt(vh) + self.eps))


def _check_finite_grad(g):
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g)).tolist()
        raise DivergenceError(f"non-finite gradient for members {bad[:10]}")


def make_optimizer(name, n, schedule=None):
    if name == "rmsprop":
        return RMSprop(n, rho=getattr(schedule, "rho", 0.99))
    if name == "adamw":
        return AdamW(n, weight_decay=getattr(schedule, "weight_decay", 0.0))
    raise InputError(f"unknown optimizer {name!r}")


def optimizer_step(optimizer, k, g, lr):
    return optimizer.step(np.asarray(k, float), np.asarray(g, float), lr)


# -- schedule -----------------------------------------------------------------
@dataclass(frozen=True)
class TrainingSchedule:
    optimizer: str = "rmsprop"
    base_lr: float = 1e-3
    max_lr: float | None = None  # None: constant base_lr
    step_size: int = 50
    gamma: float = 1.0
    epochs: int = 300
    batch_count: int = 4
    tolerance: float = 1e-6
    patience: int = 20
    rho: float = 0.99
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("rmsprop", "adamw"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if not self.base_lr > 0:
            raise InputError("base_lr must be > 0")
        if self.max_lr is not None and self.max_lr < self.base_lr:
            raise InputError("max_lr must be >= base_lr")
        if self.epochs < 1 or self.batch_count < 1 or self.step_size < 1:
            raise InputError("epochs, batch_count and step_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise InputError("gamma must lie in (0, 1]")


def cyclic_lr(iteration, schedule):
    """Triangular cycle between ``base_lr`` and ``max_lr`` with amplitude ``gamma**iteration``."""
    base = schedule.base_lr
    if schedule.max_lr is None:
        return base
    cycle = math.floor(1 + iteration / (2 * schedule.step_size))
    x = abs(iteration / schedule.step_size - 2 * cycle + 1)
    return base + (schedule.max_lr - base) * max(0.0, 1.0 - x) * schedule.gamma ** iteration


# -- noise --------------------------------------------------------------------
def channel_rms(Y):
    Y = np.asarray(Y, dtype=float)
    return np.sqrt(np.mean(Y * Y, axis=0))


def add_noise(Y, level, seed=0):
    """Add zero-mean Gaussian noise with ``sigma = level * RMS`` per column."""
    Y = np.asarray(Y, dtype=float)
    if level < 0:
        raise InputError("noise level must be >= 0")
    if level == 0:
        return Y.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = level * channel_rms(Y)
    return Y + rng.standard_normal(Y.shape) * sigma


# -- results ------------------------------------------------------------------
def average_accuracy(k_gt, k_pred, damaged=None):
    """``100 - mean_i 100 |k_pred - k_gt| / k_gt`` over damaged members."""
    k_gt, k_pred = np.asarray(k_gt, float), np.asarray(k_pred, float)
    if damaged is None:
        damaged = np.flatnonzero(np.abs(k_gt - 1.0) > 1e-12)
    if len(damaged) == 0:
        return 100.0
    err = 100.0 * np.abs(k_pred[damaged] - k_gt[damaged]) / k_gt[damaged]
    return float(100.0 - err.mean())


@dataclass
class IdentificationResult:
    k: np.ndarray
    k_initial: np.ndarray
    loss_history: list = field(default_factory=list)
    k_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    damaged: list = field(default_factory=list)  # dicts: member, ground_truth, predicted, error_pct
    false_positives: list = field(default_factory=list)  # dicts: member, predicted, error_pct
    flagged: list = field(default_factory=list)  # field mode: members beyond threshold
    accuracy: float | None = None
    max_error_pct: float | None = None
    epochs: int = 0
    stopped: str = ""
    wall_clock_s: float = 0.0
    ground_truth: np.ndarray | None = None

    def to_dict(self):
        d = asdict(self)
        for key in ("k", "k_initial", "ground_truth"):
            if d[key] is not None:
                d[key] = np.asarray(d[key]).tolist()
        d["k_history"] = [np.asarray(v).tolist() for v in self.k_history]
        return d


def classify_and_report(k, ground_truth=None, threshold=FALSE_POSITIVE_THRESHOLD):
    """Damaged-member table, false positives and accuracy (or flags without ground truth)."""
    k = np.asarray(k, float)
    out = {"damaged": [], "false_positives": [], "flagged": [], "accuracy": None,
           "max_error_pct": None}
    dev = np.abs(k - 1.0)
    out["flagged"] = [{"member": int(i), "predicted": float(k[i])}
                      for i in np.flatnonzero(dev > threshold)]
    if ground_truth is None:
        return out
    gt = np.asarray(ground_truth, float)
    damaged = np.flatnonzero(np.abs(gt - 1.0) > 1e-12)
    for i in damaged:
        out["damaged"].append({"member": int(i), "ground_truth": float(gt[i]),
                               "predicted": float(k[i]),
                               "error_pct": float(100 * abs(k[i] - gt[i]) / gt[i])})
    healthy = np.setdiff1d(np.arange(len(k)), damaged)
    for i in healthy:
        if dev[i] > threshold:
            out["false_positives"].append({"member": int(i), "predicted": float(k[i]),
                                           "error_pct": float(100 * dev[i])})
    out["accuracy"] = average_accuracy(gt, k, damaged)
    out["max_error_pct"] = max((d["error_pct"] for d in out["damaged"]), default=0.0)
    return out


# -- sensitivity-based scaling ------------------------------------------------
def member_force_envelope(model, vertical_dofs=None, load=1.0):
    """Max |axial force| per member over unit loads at each rail-level DOF."""
    if vertical_dofs is None:
        vertical_dofs = model.track.rail_level_dofs()
    mats = model.assemble(np.ones(model.n_members))
    F = np.zeros((model.n_dofs, len(vertical_dofs)))
    F[vertical_dofs, np.arange(len(vertical_dofs))] = -load
    U = np.linalg.solve(mats.stiffness, F)
    env = np.zeros(model.n_members)
    for j in range(U.shape[1]):
        env = np.maximum(env, np.abs(model.member_axial_forces(U[:, j])))
    return env


def low_sensitivity_members(model, threshold=0.02, vertical_dofs=None):
    """Members whose static force envelope is below ``threshold`` of the largest."""
    env = member_force_envelope(model, vertical_dofs)
    return np.flatnonzero(env < threshold * env.max())


def sensitivity_profile(model, value, threshold=0.02, vertical_dofs=None):
    idx = low_sensitivity_members(model, threshold, vertical_dofs)
    return ScalingProfile.with_members(model.n_members, idx, value), idx


# -- identification -----------------------------------------------------------
class BatchLoss:
    """Normalized Huber loss of one batch against the measured records.

    ``D_meas`` and ``A_meas`` have one row per grid point (row 0 = t = 0).
    """

    def __init__(self, D_meas, A_meas, config):
        self.config = config
        self.D = np.asarray(D_meas, float)
        self.A = None if A_meas is None or not config.use_acceleration else np.asarray(A_meas, float)
        self.sd = self._scale(self.D, config.normalize)
        self.sa = None if self.A is None else self._scale(self.A, config.normalize)

    @staticmethod
    def _scale(Y, mode):
        if mode == "none":
            return np.ones(Y.shape[1])
        r = channel_rms(Y)
        if mode == "global":
            return np.full(Y.shape[1], max(float(np.sqrt(np.mean(r * r))), 1e-300))
        return np.maximum(r, 1e-12 * max(r.max(), 1e-300))

    def __call__(self, g0, n):
        rows = slice(g0 + 1, g0 + 1 + n)
        cfg = self.config

        def fn(D, A):
            ld, dd = huber_loss_grad(D / self.sd, self.D[rows] / self.sd, cfg.huber_beta)
            dd = dd / self.sd
            if self.A is None:
                return ld, dd, None
            la, da = huber_loss_grad(A / self.sa, self.A[rows] / self.sa, cfg.huber_beta)
            wd, wa = cfg.displacement_weight, cfg.acceleration_weight
            return wd * ld + wa * la, wd * dd, wa * da / self.sa

        return fn


def measured_accelerations(V, dt):
    return finite_difference_acceleration(V, dt)


def identify(response, D_meas, A_meas=None, loss=LossConfig(), schedule=TrainingSchedule(),
             prior=None, scales=None, ground_truth=None, callback=None):
    """Identify deviation ratios from measured observed displacements (and accelerations).

    ``response`` is a :class:`~spanid.gradients.ResponseModel` on the same
    grid as the measurements.
    """
    t_start = time.perf_counter()
    n_m = response.model.n_members
    D_meas = np.asarray(D_meas, float)
    if D_meas.shape != (response.nsteps + 1, len(response.observed)):
        raise InputError(f"measurements have shape {D_meas.shape}; expected "
                         f"{(response.nsteps + 1, len(response.observed))} for this grid")
    prior = prior or PriorSpec()
    k = apply_prior(prior, n_m)
    k0 = k.copy()
    if scales is None:
        scales = prior.scales or ScalingProfile.ones(n_m)
    batch_loss = BatchLoss(D_meas, A_meas, loss)
    bounds = batch_bounds(response.nsteps, schedule.batch_count)
    opt = make_optimizer(schedule.optimizer, n_m, schedule)
    result = IdentificationResult(k=k, k_initial=k0, ground_truth=ground_truth)
    lam = 0.0
    it = 0
    stopped = "max_epochs"
    for epoch in range(schedule.epochs):
        X = response.zero_state()
        primary, total = [], []
        k_epoch_start = k.copy()
        for g0, n in bounds:
            response.set_k(k)
            val, g, X_next = response.batch_loss_grad(X, g0, n, batch_loss(g0, n))
            reg = l1_regularizer(k, lam)
            if not (math.isfinite(val) and np.all(np.isfinite(g))):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", last_good=k_epoch_start,
                                      epoch=epoch)
            primary.append(val)
            total.append(val + reg)
            g = g + lam * np.sign(k - 1.0)
            lr = cyclic_lr(it, schedule)
            k = optimizer_step(opt, k, scale_gradients(g, scales), lr)
            it += 1
            X = X_next
        mean_total = float(np.mean(total))
        result.loss_history.append(mean_total)
        result.k_history.append(k.copy())
        result.lr_history.append(lr)
        lam = l1_lambda(np.mean(primary), loss.l1_factor)
        if callback is not None:
            callback(epoch, k, mean_total)
        if epoch % 10 == 0 or epoch == schedule.epochs - 1:
            logger.info("epoch %d loss %.6e lr %.3e", epoch, mean_total, lr)
        p = schedule.patience
        if epoch >= p:
            prev = result.loss_history[-1 - p]
            if prev > 0 and abs(prev - mean_total) / prev < schedule.tolerance:
                stopped = "plateau"
                break
    response.set_k(k)
    result.k = k
    result.epochs = len(result.loss_history)
    result.stopped = stopped
    rep = classify_and_report(k, ground_truth)
    result.damaged = rep["damaged"]
    result.false_positives = rep["false_positives"]
    result.flagged = rep["flagged"]
    result.accuracy = rep["accuracy"]
    result.max_error_pct = rep["max_error_pct"]
    result.wall_clock_s = time.perf_counter() - t_start
    return result


__all__ = [
    "AdamW", "BatchLoss", "IdentificationResult", "LossConfig", "PriorEntry", "PriorSpec",
    "RMSprop", "TrainingSchedule", "add_noise", "apply_prior", "average_accuracy",
    "classify_and_report", "combined_loss", "cyclic_lr", "huber_loss", "identify",
    "l1_lambda", "l1_regularizer", "low_sensitivity_members", "optimizer_step",
]
