"""Critic (VR-LSTD / LSTD + boundary penalty) and actor losses with gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, NumericFailure
from .networks import NetworkSet
from .problems import Problem
from .rollout import (SchemeConfig, TrajectoryBatch, differentiable_rollout, discounted_running_cost,
                      stochastic_weights)

TD_VARIANTS = ("vr-lstd", "lstd")


@dataclass
class TDValue:
    """Per-path temporal differences and their parts, shape (K,) each."""

    td1: np.ndarray
    td2: np.ndarray
    running: np.ndarray
    stoch: np.ndarray
    terminal: np.ndarray
    initial: np.ndarray


@dataclass
class LossReport:
    critic_loss: float = float("nan")
    boundary_loss: float = float("nan")
    actor_loss: float = float("nan")
    grad_norms: dict = field(default_factory=dict)
    truncation_rate: float = 0.0


def td_values(batch: TrajectoryBatch, problem: Problem, value_fn, grad_fn=None) -> TDValue:
    """Evaluate both temporal differences with plain numpy callables.

    With ``grad_fn=None`` the stochastic integral is zero and ``td1 == td2``.
    """
    running = discounted_running_cost(batch, problem)
    terminal = np.exp(-problem.gamma * batch.t_end) * np.asarray(value_fn(batch.terminal))
    initial = np.asarray(value_fn(batch.x0))
    if grad_fn is None:
        stoch = np.zeros(batch.size)
    else:
        w = stochastic_weights(batch, problem)
        stoch = np.bincount(batch.traj, weights=np.sum(np.asarray(grad_fn(batch.states)) * w, axis=1),
                            minlength=batch.size).astype(np.float64)
    td2 = running + terminal - initial
    td1 = td2 - stoch
    return TDValue(td1, td2, running, stoch, terminal, initial)


def td_statistics(batch: TrajectoryBatch, problem: Problem, nets: NetworkSet | None = None,
                  value_fn=None, grad_fn=None) -> dict:
    """Sample means/variances of both TDs, from nets or explicit callables."""
    if nets is not None:
        value_fn = value_fn or nets.value
        if grad_fn is None and nets.grad_net is not None:
            grad_fn = nets.gradient
    tdv = td_values(batch, problem, value_fn, grad_fn)
    K = batch.size
    return {
        "mean_td1": float(np.mean(tdv.td1)),
        "mean_td2": float(np.mean(tdv.td2)),
        "var_td1": float(np.var(tdv.td1, ddof=1)) if K > 1 else 0.0,
        "var_td2": float(np.var(tdv.td2, ddof=1)) if K > 1 else 0.0,
        "rms_td1": float(np.sqrt(np.mean(tdv.td1**2))),
        "rms_td2": float(np.sqrt(np.mean(tdv.td2**2))),
        "n": K,
    }


def critic_loss(batch: TrajectoryBatch, boundary_points, problem: Problem, nets: NetworkSet,
                eta: float = 1.0, td: str = "vr-lstd"):
    """Mean squared TD plus ``eta`` times the boundary mismatch.

    Returns ``(td_loss, boundary_loss, grads)`` where ``grads`` maps ``"value"``
    (and ``"grad"`` for VR-LSTD) to flat gradients of
    ``td_loss + eta * boundary_loss``. Path data enter as constants.
    """
    if td not in TD_VARIANTS:
        raise ContractViolation(f"unknown TD variant {td!r}")
    K = batch.size
    boundary_points = np.atleast_2d(np.asarray(boundary_points, dtype=np.float64))
    if K == 0 or len(boundary_points) == 0:
        raise ContractViolation("critic loss needs a non-empty batch")
    tape = ad.Tape()
    wv = nets.value_net.params.leaves(tape)
    pts = np.concatenate([batch.x0, batch.terminal, boundary_points])
    values = nets.value(pts, wv)
    v0 = values[:K]
    vT = values[K : 2 * K]
    vB = values[2 * K :]

    running = discounted_running_cost(batch, problem)
    disc = np.exp(-problem.gamma * batch.t_end)
    td2 = ad.sub(ad.add(running, ad.mul(disc, vT)), v0)
    wg = None
    if td == "vr-lstd":
        if nets.grad_net is None:
            raise ContractViolation("VR-LSTD needs a gradient network")
        wg = nets.grad_net.params.leaves(tape)
        weights = stochastic_weights(batch, problem)
        g = nets.gradient(batch.states, wg)
        stoch = ad.segment_sum(ad.rowdot(g, weights), batch.traj, K)
        resid = ad.sub(td2, stoch)
    else:
        resid = td2
    td_loss = ad.mean(ad.square(resid))
    mismatch = ad.sub(vB, problem.boundary_cost(boundary_points))
    b_loss = ad.mean(ad.square(mismatch))
    total = ad.add(td_loss, ad.mul(eta, b_loss))
    tape.backward(total)
    grads = {"value": nets.value_net.params.gather(tape, wv)}
    if wg is not None:
        grads["grad"] = nets.grad_net.params.gather(tape, wg)
    return float(td_loss.value), float(b_loss.value), grads


def actor_loss(problem: Problem, nets: NetworkSet, x0, cfg: SchemeConfig, rng: np.random.Generator,
               grad_through_h: bool = True, penalty_weight: float = 0.0, penalty_points=None,
               return_tape: bool = False):
    """Rollout cost plus discounted critic value at the stopping state.

    The critic enters through ``stop_gradient``: its parameters get no
    adjoint, while its input (the stopping state) does. Returns
    ``(loss, grad_control)`` or, with ``return_tape``, also a dict holding
    the tape, the value-net leaves and the rollout record.
    """
    tape = ad.Tape()
    wu = nets.control_net.params.leaves(tape)
    wv_leaves = nets.value_net.params.leaves(tape)
    wv = {k: ad.stop_gradient(v) for k, v in wv_leaves.items()}

    def control(x):
        return nets.control(x, wu)

    roll = differentiable_rollout(problem, control, x0, cfg, rng, tape, grad_through_h)
    v_end = nets.value(roll.terminal, wv)
    disc = ad.exp(ad.mul(-problem.gamma, roll.t_end))
    per_path = ad.add(roll.running, ad.mul(disc, v_end))
    loss = ad.mean(per_path)
    if penalty_weight and penalty_points is not None:
        excess = ad.relu(ad.sub(ad.norm(nets.control(penalty_points, wu)), 1.0))
        loss = ad.add(loss, ad.mul(penalty_weight, ad.mean(excess)))
    if not np.isfinite(loss.value).all():
        raise NumericFailure("non-finite actor loss", loss.index)
    tape.backward(loss)
    grad = nets.control_net.params.gather(tape, wu)
    if return_tape:
        return float(loss.value), grad, {"tape": tape, "value_leaves": wv_leaves, "rollout": roll}
    return float(loss.value), grad
