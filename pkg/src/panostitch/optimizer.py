"""Per-scene Adam optimization of the stitching parameters."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, pipeline
from .errors import DomainError, NonFiniteLossError


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 2000
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError("beta1 and beta2 must lie in [0, 1)")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")


@dataclass
class OptimReport:
    """Loss history and run statistics of one optimization."""

    total_history: list = field(default_factory=list)
    perceptual_history: list = field(default_factory=list)
    ssim_history: list = field(default_factory=list)
    final_grad_max_norm: float = 0.0
    wall_time_s: float = 0.0
    best_iteration: int = -1
    best_loss: float = math.inf

    def best_so_far(self):
        """Running minimum of the total-loss history (monotone nonincreasing)."""
        return np.minimum.accumulate(np.asarray(self.total_history))


class AdamState:
    """First/second moment buffers for a dict of parameter arrays."""

    def __init__(self, params):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params, grads, state, cfg, frozen=()):
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` are dicts of matching arrays; groups listed in
    ``frozen`` are skipped. Returns (params, state).
    """
    state.t += 1
    b1t = 1.0 - cfg.beta1**state.t
    b2t = 1.0 - cfg.beta2**state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise DomainError(f"gradient shape {g.shape} does not match {key} {p.shape}")
        if key in frozen:
            continue
        m = state.m[key]
        v = state.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / b1t
        v_hat = v / b2t
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return params, state


def grad_max_norm(grads):
    return max(float(np.max(np.abs(g))) if g.size else 0.0 for g in grads.as_dict().values())


def optimize_scene(
    inputs,
    base_fields,
    targets,
    masks,
    m_hat,
    loss_cfg,
    optim_cfg,
    *,
    alpha=pipeline.DEFAULT_ALPHA,
    control_scale=pipeline.DEFAULT_CONTROL_SCALE,
    frozen=(),
    params=None,
    log_fn=None,
):
    """Fit scene parameters to the weak-supervision targets.

    Starts from the identity initialization (or ``params`` if given), runs
    ``optim_cfg.iterations`` of forward/backward plus Adam, and returns
    (best_params, report) where best_params minimizes the recorded loss.
    Deterministic for a fixed configuration.
    """
    erp_hw = base_fields[0].shape[:2]
    if params is None:
        params = pipeline.init_params_from_shapes(
            len(inputs), (erp_hw[1], erp_hw[0]), control_scale, dtype=inputs[0].dtype
        )
    for name in frozen:
        if name not in pipeline.PARAM_GROUPS:
            raise DomainError(f"unknown parameter group {name!r}")
    prepared = losses.prepare_losses(list(targets), list(masks), m_hat, loss_cfg)
    state = AdamState(params.as_dict())
    report = OptimReport()
    best_params = params.copy()
    start = time.perf_counter()
    grads = None
    for it in range(optim_cfg.iterations):
        total, comps, grads = pipeline.forward_backward(
            inputs, base_fields, params, targets, masks, m_hat, loss_cfg,
            alpha=alpha, prepared=prepared,
        )
        if not math.isfinite(total):
            raise NonFiniteLossError(
                f"non-finite loss {total} at iteration {it}", iteration=it
            )
        report.total_history.append(total)
        report.perceptual_history.append(comps["perceptual"])
        report.ssim_history.append(comps["ssim"])
        if total < report.best_loss:
            report.best_loss = total
            report.best_iteration = it
            best_params = params.copy()
        adam_step(params.as_dict(), grads.as_dict(), state, optim_cfg, frozen=frozen)
        if log_fn is not None and optim_cfg.log_every > 0 and it % optim_cfg.log_every == 0:
            log_fn(it, total, comps)
    report.final_grad_max_norm = grad_max_norm(grads)
    report.wall_time_s = time.perf_counter() - start
    return best_params, report
