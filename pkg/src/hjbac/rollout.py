"""Euler-Maruyama simulation of the controlled diffusion, stopped at exit.

A batch of ``K`` paths is advanced in lockstep; at global step ``n`` every
still-active path draws row ``k`` of a fresh ``(K, d_w)`` normal block, so a
path's noise depends only on the generator seed, ``n`` and ``k``.

A step whose proposal leaves the ball is discarded and the path stops at the
last inside state. Otherwise a path stops when its clock reaches ``T`` or
after ``step_cap`` steps (flagged as truncated).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .problems import Problem

SCHEMES = ("naive", "adaptive")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "adaptive"
    T: float = 0.2
    N: int = 50
    min_step_factor: float = 1e-4
    cap_factor: int = 16

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractViolation(f"unknown scheme {self.scheme!r}")
        if self.T <= 0 or self.N < 1:
            raise ContractViolation("need T > 0 and N >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def min_step(self) -> float:
        return self.dt * self.min_step_factor

    @property
    def step_cap(self) -> int:
        return self.cap_factor * self.N

    def band_width(self, sigma_bound: float, dim: int) -> float:
        return sigma_bound * np.sqrt(3.0 * dim * self.dt)


def _adaptive_h(dist, cfg: SchemeConfig, sigma_bound: float, dim: int):
    inside_band = ad.value_of(dist) <= cfg.band_width(sigma_bound, dim)
    shrunk = ad.maximum(ad.mul(1.0 / (3.0 * dim * sigma_bound**2), ad.square(dist)), cfg.min_step)
    return ad.where(inside_band, shrunk, cfg.dt)


def _finishes(h, remaining, T):
    return ad.value_of(h) >= ad.value_of(remaining) - 1e-12 * T


def step_size(x, cfg: SchemeConfig, problem: Problem, t_accum=None) -> np.ndarray:
    """Step length for each row of ``x`` (shape (B, d)) at clock ``t_accum``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not problem.domain.contains(x).all():
        raise ContractViolation("step_size needs points inside the domain")
    if cfg.scheme == "naive":
        return np.full(len(x), cfg.dt)
    dist = problem.radius - np.linalg.norm(x, axis=1)
    h = _adaptive_h(dist, cfg, problem.sigma_bound, problem.dim)
    if t_accum is not None:
        remaining = cfg.T - np.asarray(t_accum, dtype=np.float64)
        h = np.where(_finishes(h, remaining, cfg.T), remaining, h)
    return h


@dataclass
class Trajectory:
    """One stopped path: states ``0..n_bar`` and the ``n_bar`` steps between them."""

    states: np.ndarray
    steps: np.ndarray
    noises: np.ndarray
    times: np.ndarray
    controls: np.ndarray
    exit: bool
    truncated: bool

    @property
    def n_bar(self) -> int:
        return len(self.steps)


@dataclass
class TrajectoryBatch:
    """``K`` stopped paths stored as flat per-step rows plus per-path endpoints.

    Rows are in generation order (step-major), so the rows of any one path
    appear in time order.
    """

    x0: np.ndarray
    traj: np.ndarray
    step: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    h: np.ndarray
    t: np.ndarray
    xi: np.ndarray
    terminal: np.ndarray
    t_end: np.ndarray
    n_bar: np.ndarray
    exit: np.ndarray
    truncated: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.x0)

    @property
    def truncation_rate(self) -> float:
        return float(np.mean(self.truncated))

    def trajectory(self, k: int) -> Trajectory:
        rows = np.flatnonzero(self.traj == k)
        states = np.vstack([self.states[rows], self.terminal[k : k + 1]])
        times = np.append(self.t[rows], self.t_end[k])
        return Trajectory(states, self.h[rows], self.xi[rows], times, self.controls[rows],
                          bool(self.exit[k]), bool(self.truncated[k]))


def rollout(problem: Problem, control, x0, cfg: SchemeConfig, rng: np.random.Generator,
            check_sigma: bool = True) -> TrajectoryBatch:
    """Simulate without recording gradients. ``control`` maps (B, d) -> (B, d_u)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not problem.domain.contains(x0).all():
        raise ContractViolation("initial points must lie inside the domain")
    K, d = x0.shape
    naive = cfg.scheme == "naive"
    x = x0.copy()
    t = np.zeros(K)
    terminal = x0.copy()
    t_end = np.zeros(K)
    n_bar = np.zeros(K, dtype=np.int64)
    exit_ = np.zeros(K, dtype=bool)
    truncated = np.zeros(K, dtype=bool)
    active = np.arange(K)
    rows = {k: [] for k in ("traj", "step", "states", "controls", "h", "t", "xi")}

    n = 0
    while active.size and n < cfg.step_cap:
        xi = rng.standard_normal((K, problem.noise_dim))[active]
        xa, ta = x[active], t[active]
        u = np.asarray(control(xa), dtype=np.float64)
        if check_sigma:
            problem.check_sigma_bound(xa, u)
        if naive:
            h = np.full(active.size, cfg.dt)
            fin = np.full(active.size, n + 1 == cfg.N)
            t_new = np.full(active.size, (n + 1) * cfg.dt)
        else:
            h = _adaptive_h(problem.radius - np.linalg.norm(xa, axis=1), cfg, problem.sigma_bound, d)
            remaining = cfg.T - ta
            fin = _finishes(h, remaining, cfg.T)
            h = np.where(fin, remaining, h)
            t_new = np.where(fin, cfg.T, ta + h)
        prop = xa + problem.drift(xa, u) * h[:, None] + problem.diffusion_apply(xa, u, xi) * np.sqrt(h)[:, None]
        inside = problem.domain.contains(prop)

        rows["traj"].append(active[inside])
        rows["step"].append(np.full(int(inside.sum()), n))
        rows["states"].append(xa[inside])
        rows["controls"].append(u[inside])
        rows["h"].append(h[inside])
        rows["t"].append(ta[inside])
        rows["xi"].append(xi[inside])

        out = active[~inside]
        exit_[out] = True
        n_bar[out] = n
        terminal[out] = xa[~inside]
        t_end[out] = ta[~inside]

        moved = active[inside]
        x[moved] = prop[inside]
        t[moved] = t_new[inside]
        done = inside & fin
        ended = active[done]
        n_bar[ended] = n + 1
        terminal[ended] = prop[done]
        t_end[ended] = t_new[done]
        active = active[inside & ~fin]
        n += 1

    truncated[active] = True
    n_bar[active] = n
    terminal[active] = x[active]
    t_end[active] = t[active]

    def cat(key, width=None):
        if rows[key]:
            return np.concatenate(rows[key])
        return np.zeros((0, width) if width else 0)

    return TrajectoryBatch(
        x0=x0, traj=cat("traj").astype(np.int64), step=cat("step").astype(np.int64),
        states=cat("states", d), controls=cat("controls", problem.control_dim), h=cat("h"),
        t=cat("t"), xi=cat("xi", problem.noise_dim), terminal=terminal, t_end=t_end,
        n_bar=n_bar, exit=exit_, truncated=truncated, meta={"scheme": cfg.scheme, "steps": n},
    )


def discounted_running_cost(batch: TrajectoryBatch, problem: Problem) -> np.ndarray:
    """Per path: sum over steps of ``exp(-gamma t_n) f(x_n, u_n) h_n``."""
    f = np.asarray(problem.running_cost(batch.states, batch.controls))
    w = np.exp(-problem.gamma * batch.t) * f * batch.h
    return np.bincount(batch.traj, weights=w, minlength=batch.size).astype(np.float64)


def stochastic_weights(batch: TrajectoryBatch, problem: Problem) -> np.ndarray:
    """Rows ``exp(-gamma t_n) sigma(x_n, u_n) xi_n sqrt(h_n)``, shape (M, d)."""
    noise = np.asarray(problem.diffusion_apply(batch.states, batch.controls, batch.xi))
    scale = np.exp(-problem.gamma * batch.t) * np.sqrt(batch.h)
    return noise * scale[:, None]


def discounted_stochastic_integral(batch: TrajectoryBatch, G, problem: Problem, weights=None):
    """Per path: sum of ``exp(-gamma t_n) G(x_n) . sigma xi_n sqrt(h_n)``.

    ``G`` maps (M, d) states to (M, d); it may return tape nodes.
    """
    w = stochastic_weights(batch, problem) if weights is None else weights
    return ad.segment_sum(ad.rowdot(G(batch.states), w), batch.traj, batch.size)


@dataclass
class DifferentiableRollout:
    running: object
    terminal: object
    t_end: object
    exit: np.ndarray
    truncated: np.ndarray
    n_bar: np.ndarray

    @property
    def truncation_rate(self) -> float:
        return float(np.mean(self.truncated))


def differentiable_rollout(problem: Problem, control, x0, cfg: SchemeConfig, rng: np.random.Generator,
                           tape: ad.Tape, grad_through_h: bool = True) -> DifferentiableRollout:
    """Unrolled rollout recorded on ``tape``.

    ``control`` maps a (B, d) node to a (B, d_u) node. Gradients flow through
    the controls, the state recursion and (optionally) the adaptive step
    lengths and clock; the stopping decisions themselves carry none.
    Uses the same noise layout as :func:`rollout`.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not problem.domain.contains(x0).all():
        raise ContractViolation("initial points must lie inside the domain")
    K, d = x0.shape
    naive = cfg.scheme == "naive"
    track_t = grad_through_h and not naive
    x = tape.constant(x0)
    t = np.zeros(K)
    active = np.arange(K)
    cost_parts, cost_idx = [], []
    end_x, end_t, end_idx = [], [], []
    n_bar = np.zeros(K, dtype=np.int64)
    exit_ = np.zeros(K, dtype=bool)
    truncated = np.zeros(K, dtype=bool)

    n = 0
    while active.size and n < cfg.step_cap:
        xi = rng.standard_normal((K, problem.noise_dim))[active]
        u = control(x)
        if naive:
            h = np.full(active.size, cfg.dt)
            fin = np.full(active.size, n + 1 == cfg.N)
            t_new = np.full(active.size, (n + 1) * cfg.dt)
        else:
            if track_t:
                dist = problem.domain.signed_dist(x)
            else:
                dist = problem.radius - np.linalg.norm(x.value, axis=1)
            h = _adaptive_h(dist, cfg, problem.sigma_bound, d)
            remaining = ad.sub(cfg.T, t)
            fin = _finishes(h, remaining, cfg.T)
            h = ad.where(fin, remaining, h)
            t_new = ad.where(fin, cfg.T, ad.add(t, h))
        step = ad.add(ad.mul(problem.drift(x, u), ad.reshape(h, (-1, 1))),
                      ad.mul(problem.diffusion_apply(x, u, xi), ad.reshape(ad.sqrt(h), (-1, 1))))
        prop = ad.add(x, step)
        inside = problem.domain.contains(prop)

        cost = ad.mul(ad.mul(ad.exp(ad.mul(-problem.gamma, t)), problem.running_cost(x, u)), h)
        acc = np.flatnonzero(inside)
        cost_parts.append(ad.take_rows(cost, acc))
        cost_idx.append(active[acc])

        out = np.flatnonzero(~inside)
        if out.size:
            end_x.append(ad.take_rows(x, out))
            end_t.append(ad.take_rows(t, out))
            end_idx.append(active[out])
            exit_[active[out]] = True
            n_bar[active[out]] = n
        done = np.flatnonzero(inside & fin)
        if done.size:
            end_x.append(ad.take_rows(prop, done))
            end_t.append(ad.take_rows(t_new, done))
            end_idx.append(active[done])
            n_bar[active[done]] = n + 1
        keep = np.flatnonzero(inside & ~fin)
        x = ad.take_rows(prop, keep)
        t = ad.take_rows(t_new, keep)
        active = active[keep]
        n += 1

    if active.size:
        end_x.append(x)
        end_t.append(t)
        end_idx.append(active)
        truncated[active] = True
        n_bar[active] = n

    running = ad.segment_sum(ad.concat(cost_parts), np.concatenate(cost_idx), K)
    order = np.argsort(np.concatenate(end_idx), kind="stable")
    terminal = ad.take_rows(ad.concat(end_x), order)
    t_end = ad.take_rows(ad.concat(end_t), order)
    return DifferentiableRollout(running, terminal, t_end, exit_, truncated, n_bar)


def write_trajectories_csv(path, batch: TrajectoryBatch, limit: int | None = None) -> None:
    """Per-step dump: ``traj, n, t, h, x_1.., u_1.., exit``; the final row of
    each path is its stopping state with empty ``h`` and ``u``."""
    d = batch.x0.shape[1]
    du = batch.controls.shape[1]
    header = ["traj", "n", "t", "h"] + [f"x_{i + 1}" for i in range(d)] + [f"u_{i + 1}" for i in range(du)] + ["exit"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(batch.size if limit is None else min(limit, batch.size)):
            tr = batch.trajectory(k)
            for i in range(tr.n_bar):
                w.writerow([k, i, repr(float(tr.times[i])), repr(float(tr.steps[i]))]
                           + [repr(float(v)) for v in tr.states[i]]
                           + [repr(float(v)) for v in tr.controls[i]] + [0])
            w.writerow([k, tr.n_bar, repr(float(tr.times[-1])), ""]
                       + [repr(float(v)) for v in tr.states[-1]] + [""] * du + [int(tr.exit)])
