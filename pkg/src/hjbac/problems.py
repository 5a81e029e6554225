"""Benchmark control problems on balls, with closed-form solutions.

Each problem supplies the coefficients of

    inf_u [ 1/2 Tr(s s^T Hess V) + b^T grad V + f ] - gamma V = 0   in |x| < R,
    V = g                                                          on |x| = R,

written with the polymorphic ops of :mod:`hjbac.autodiff`, so the same code
serves plain sampling and differentiated rollouts. ``x`` and ``u`` are always
batches of shape (B, d) and (B, d_u).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation

PROBLEMS = ("lqr", "vdp", "eikonal", "nclqr")


def _col(v):
    return ad.reshape(v, (-1, 1))


@dataclass(frozen=True)
class BallDomain:
    radius: float

    def signed_dist(self, x):
        return ad.sub(self.radius, ad.norm(x))

    def contains(self, x) -> np.ndarray:
        return np.linalg.norm(ad.value_of(x), axis=-1) < self.radius


def sample_initial(domain: BallDomain, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the ball: isotropic direction, radius ``R U^(1/d)``."""
    z = rng.standard_normal((n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = domain.radius * rng.uniform(size=n) ** (1.0 / dim)
    return z * r[:, None]


def sample_boundary(domain: BallDomain, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, dim))
    return domain.radius * z / np.linalg.norm(z, axis=1, keepdims=True)


class SigmaBoundError(ContractViolation):
    pass


class Problem:
    """Interface shared by all benchmark problems."""

    name = "problem"
    control_head = "unconstrained"

    def __init__(self, dim: int, control_dim: int, gamma: float, radius: float, sigma_bound: float):
        self.dim = int(dim)
        self.control_dim = int(control_dim)
        self.noise_dim = int(dim)
        self.gamma = float(gamma)
        self.domain = BallDomain(float(radius))
        self.sigma_bound = float(sigma_bound)

    @property
    def radius(self) -> float:
        return self.domain.radius

    has_exact = True

    # -- coefficients
    def drift(self, x, u):
        raise NotImplementedError

    def diffusion_apply(self, x, u, xi):
        """``sigma(x, u) @ xi`` row by row."""
        raise NotImplementedError

    def diffusion(self, x, u) -> np.ndarray:
        """Full diffusion matrices, shape (B, d, d_w)."""
        raise NotImplementedError

    def sigma_norm(self, x, u) -> np.ndarray:
        """Operator norm of ``sigma(x, u)`` per row."""
        return np.linalg.norm(self.diffusion(x, u), ord=2, axis=(1, 2))

    def running_cost(self, x, u):
        raise NotImplementedError

    def boundary_cost(self, x) -> np.ndarray:
        raise NotImplementedError

    # -- exact solution
    def exact_value(self, x) -> np.ndarray:
        raise NotImplementedError

    def exact_control(self, x) -> np.ndarray:
        raise NotImplementedError

    def exact_gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def check_sigma_bound(self, x, u, tol: float = 1e-9) -> None:
        worst = float(np.max(self.sigma_norm(x, u))) if len(x) else 0.0
        if worst > self.sigma_bound + tol:
            raise SigmaBoundError(
                f"{self.name}: |sigma| = {worst:.6g} exceeds the configured bound {self.sigma_bound:.6g}"
            )

    def constants(self) -> dict:
        return {}


def lqr_gain(p: float, q: float, beta: float, gamma: float) -> float:
    return (np.sqrt(q * q * gamma * gamma + 4.0 * p * q * beta * beta) - gamma * q) / (2.0 * beta * beta)


class LQR(Problem):
    name = "lqr"

    def __init__(self, dim=5, p=1.0, q=1.0, beta=1.0, gamma=1.0, R=1.0):
        if min(p, q, beta, R) <= 0 or gamma < 0:
            raise ContractViolation("LQR needs p, q, beta, R > 0 and gamma >= 0")
        super().__init__(dim, dim, gamma, R, np.sqrt(2.0))
        self.p, self.q, self.beta = float(p), float(q), float(beta)
        self.k = lqr_gain(self.p, self.q, self.beta, self.gamma)

    def drift(self, x, u):
        return ad.mul(self.beta, u)

    def diffusion_apply(self, x, u, xi):
        return ad.mul(np.sqrt(2.0), xi)

    def diffusion(self, x, u):
        return np.broadcast_to(np.sqrt(2.0) * np.eye(self.dim), (len(x), self.dim, self.dim))

    def sigma_norm(self, x, u):
        return np.full(len(x), np.sqrt(2.0))

    def running_cost(self, x, u):
        return ad.sub(ad.add(ad.mul(self.p, ad.sqnorm(x)), ad.mul(self.q, ad.sqnorm(u))),
                      2.0 * self.k * self.dim)

    def boundary_cost(self, x):
        return np.full(len(x), self.k * self.radius**2)

    def exact_value(self, x):
        return self.k * np.sum(x * x, axis=1)

    def exact_gradient(self, x):
        return 2.0 * self.k * x

    def exact_control(self, x):
        return -(self.k * self.beta / self.q) * x

    def constants(self):
        return {"p": self.p, "q": self.q, "beta": self.beta, "gamma": self.gamma, "R": self.radius}


class VanDerPol(Problem):
    """Coupled stochastic Van der Pol oscillators, ``d = 2n``.

    Positions are ``x[:, :n]``, velocities ``x[:, n:]``; neighbours wrap
    around within each block.
    """

    name = "vdp"

    def __init__(self, dim=4, a=1.0, epsilon=0.1, q=1.0, gamma=1.0, R=1.0):
        if dim % 2 or dim < 4:
            # at d = 2 the neighbour ring degenerates and V is no longer the exact solution
            raise ContractViolation(f"Van der Pol needs an even dimension >= 4, got {dim}")
        if min(a, q, R) <= 0:
            raise ContractViolation("Van der Pol needs a, q, R > 0")
        n = dim // 2
        super().__init__(dim, n, gamma, R, np.sqrt(2.0))
        self.n = n
        self.a, self.epsilon, self.q = float(a), float(epsilon), float(q)
        self._prev = (np.arange(n) - 1) % n
        self._next = (np.arange(n) + 1) % n

    def _blocks(self, x):
        return x[:, : self.n], x[:, self.n :]

    def _block_grad(self, y):
        # derivative of a sum y_i^2 - eps * sum y_i y_{i+1} over a ring
        nb = ad.add(y[:, self._prev], y[:, self._next])
        return ad.sub(ad.mul(2.0 * self.a, y), ad.mul(self.epsilon, nb))

    def _value(self, x):
        x1, x2 = self._blocks(x)
        ring = ad.add(ad.rowdot(x1[:, self._prev], x1), ad.rowdot(x2, x2[:, self._next]))
        return ad.sub(ad.mul(self.a, ad.sqnorm(x)), ad.mul(self.epsilon, ring))

    def drift(self, x, u):
        x1, x2 = self._blocks(x)
        vel = ad.add(ad.sub(ad.mul(ad.sub(1.0, ad.square(x1)), x2), x1), u)
        return ad.concat([x2, vel], axis=1)

    def diffusion_apply(self, x, u, xi):
        return ad.mul(np.sqrt(2.0), xi)

    def diffusion(self, x, u):
        return np.broadcast_to(np.sqrt(2.0) * np.eye(self.dim), (len(x), self.dim, self.dim))

    def sigma_norm(self, x, u):
        return np.full(len(x), np.sqrt(2.0))

    def running_cost(self, x, u):
        x1, x2 = self._blocks(x)
        g1 = self._block_grad(x1)
        g2 = self._block_grad(x2)
        f = ad.add(ad.mul(self.q, ad.sqnorm(u)), ad.mul(self.gamma, self._value(x)))
        f = ad.add(f, ad.mul(1.0 / (4.0 * self.q), ad.sqnorm(g2)))
        f = ad.sub(f, 4.0 * self.n * self.a)
        f = ad.sub(f, ad.rowdot(x2, g1))
        passive = ad.sub(ad.mul(ad.sub(1.0, ad.square(x1)), x2), x1)
        return ad.sub(f, ad.rowdot(passive, g2))

    def boundary_cost(self, x):
        return self._value(np.asarray(x))

    def exact_value(self, x):
        return self._value(np.asarray(x))

    def exact_gradient(self, x):
        x1, x2 = self._blocks(np.asarray(x))
        return np.concatenate([self._block_grad(x1), self._block_grad(x2)], axis=1)

    def exact_control(self, x):
        _, x2 = self._blocks(np.asarray(x))
        return -self._block_grad(x2) / (2.0 * self.q)

    def constants(self):
        return {"a": self.a, "epsilon": self.epsilon, "q": self.q, "gamma": self.gamma, "R": self.radius}


class Eikonal(Problem):
    """Diffusive Eikonal equation with speed ``c(|x|)`` and unit-ball controls."""

    name = "eikonal"
    control_head = "unit-ball"

    def __init__(self, dim=5, a2=1.2, a3=0.2, R=1.0):
        if not 2.0 * a2 - 3.0 * a3 * R > 0:
            raise ContractViolation("Eikonal needs 2 a2 - 3 a3 R > 0")
        self.a2, self.a3 = float(a2), float(a3)
        self.epsilon = 1.0 / (2.0 * dim * self.a2)
        super().__init__(dim, dim, 0.0, R, np.sqrt(2.0 * self.epsilon))

    def speed(self, x):
        num = 3.0 * (self.dim + 1) * self.a3
        den = ad.mul(2.0 * self.dim * self.a2, ad.sub(2.0 * self.a2, ad.mul(3.0 * self.a3, ad.norm(x))))
        return ad.div(num, den)

    def drift(self, x, u):
        return ad.mul(_col(self.speed(x)), u)

    def diffusion_apply(self, x, u, xi):
        return ad.mul(self.sigma_bound, xi)

    def diffusion(self, x, u):
        return np.broadcast_to(self.sigma_bound * np.eye(self.dim), (len(x), self.dim, self.dim))

    def sigma_norm(self, x, u):
        return np.full(len(x), self.sigma_bound)

    def running_cost(self, x, u):
        return np.ones(len(ad.value_of(u)))

    def boundary_cost(self, x):
        return np.full(len(x), self.a3 * self.radius**3 - self.a2 * self.radius**2)

    def exact_value(self, x):
        r = np.linalg.norm(x, axis=1)
        return self.a3 * r**3 - self.a2 * r**2

    def exact_gradient(self, x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        return (3.0 * self.a3 * r - 2.0 * self.a2) * x

    def exact_control(self, x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(r > 0, r, 1.0)

    def constants(self):
        return {"a2": self.a2, "a3": self.a3, "R": self.radius}


class NonconstantLQR(Problem):
    """LQR whose diffusion ``diag(sqrt2 (1 + eps x_i u_i))`` depends on state and control."""

    name = "nclqr"

    def __init__(self, dim=5, q=1.0, beta=1.0, gamma=1.0, R=1.0, epsilon=-1.0, p=1.0, u_max=3.0):
        if min(q, beta, R, p) <= 0:
            raise ContractViolation("nonconstant LQR needs p, q, beta, R > 0")
        bound = np.sqrt(2.0) * (1.0 + abs(epsilon) * R * u_max)
        super().__init__(dim, dim, gamma, R, bound)
        self.p, self.q, self.beta, self.epsilon = float(p), float(q), float(beta), float(epsilon)
        self.u_max = float(u_max)
        self.k = lqr_gain(self.p, self.q, self.beta, self.gamma)

    def drift(self, x, u):
        return ad.mul(self.beta, u)

    def _diag(self, x, u):
        return ad.mul(np.sqrt(2.0), ad.add(1.0, ad.mul(self.epsilon, ad.mul(x, u))))

    def diffusion_apply(self, x, u, xi):
        return ad.mul(self._diag(x, u), xi)

    def diffusion(self, x, u):
        diag = self._diag(np.asarray(x), np.asarray(u))
        out = np.zeros((len(x), self.dim, self.dim))
        idx = np.arange(self.dim)
        out[:, idx, idx] = diag
        return out

    def sigma_norm(self, x, u):
        return np.max(np.abs(self._diag(np.asarray(x), np.asarray(u))), axis=1)

    def state_cost(self, x):
        k, q, eps = self.k, self.q, self.epsilon
        x2 = ad.square(x)
        frac = ad.div(ad.mul(k * k * (self.beta + 2.0 * eps) ** 2, x2), ad.add(q, ad.mul(2.0 * k * eps * eps, x2)))
        return ad.sub(ad.add(ad.mul(self.gamma * k, ad.sqnorm(x)), ad.sum(frac, axis=1)), 2.0 * k * self.dim)

    def running_cost(self, x, u):
        return ad.add(ad.mul(self.q, ad.sqnorm(u)), self.state_cost(x))

    def boundary_cost(self, x):
        return np.full(len(x), self.k * self.radius**2)

    def exact_value(self, x):
        return self.k * np.sum(x * x, axis=1)

    def exact_gradient(self, x):
        return 2.0 * self.k * x

    def exact_control(self, x):
        x = np.asarray(x)
        return -(self.beta + 2.0 * self.epsilon) * x / (self.q / self.k + 2.0 * self.epsilon**2 * x * x)

    def constants(self):
        return {"p": self.p, "q": self.q, "beta": self.beta, "gamma": self.gamma, "R": self.radius,
                "epsilon": self.epsilon, "u_max": self.u_max}


def make_lqr(d=5, p=1.0, q=1.0, beta=1.0, gamma=1.0, R=1.0) -> LQR:
    return LQR(d, p, q, beta, gamma, R)


def make_van_der_pol(d=4, a=1.0, epsilon=0.1, q=1.0, gamma=1.0, R=1.0) -> VanDerPol:
    return VanDerPol(d, a, epsilon, q, gamma, R)


def make_eikonal(d=5, a2=1.2, a3=0.2, R=1.0) -> Eikonal:
    return Eikonal(d, a2, a3, R)


def make_nonconstant_lqr(d=5, q=1.0, beta=1.0, gamma=1.0, R=1.0, epsilon=-1.0, p=1.0, u_max=3.0):
    return NonconstantLQR(d, q, beta, gamma, R, epsilon, p, u_max)


_FACTORIES = {"lqr": make_lqr, "vdp": make_van_der_pol, "eikonal": make_eikonal,
              "nclqr": make_nonconstant_lqr}


def make_problem(name: str, dim: int, **constants) -> Problem:
    """Build a benchmark by id, ignoring constants it does not take."""
    if name not in _FACTORIES:
        raise ContractViolation(f"unknown problem {name!r}; choose from {PROBLEMS}")
    import inspect

    factory = _FACTORIES[name]
    accepted = inspect.signature(factory).parameters
    kwargs = {k: v for k, v in constants.items() if k in accepted and v is not None}
    return factory(dim, **kwargs)


def pde_residual(problem: Problem, V, u, x, step: float = 1e-4) -> np.ndarray:
    """HJB left-hand side at fixed control, by central finite differences.

    ``V`` maps (B, d) -> (B,), ``u`` maps (B, d) -> (B, d_u). Independent of
    the autodiff engine; used to validate problems and exact solutions.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, d = x.shape
    dist = problem.radius - np.linalg.norm(x, axis=1)
    if np.any(dist <= 2.0 * step):
        raise ContractViolation("pde_residual needs points farther than the stencil from the boundary")
    eye = np.eye(d) * step
    v0 = V(x)
    vp = np.stack([V(x + eye[i]) for i in range(d)], axis=1)
    vm = np.stack([V(x - eye[i]) for i in range(d)], axis=1)
    grad = (vp - vm) / (2.0 * step)
    hess = np.zeros((B, d, d))
    for i in range(d):
        hess[:, i, i] = (vp[:, i] - 2.0 * v0 + vm[:, i]) / step**2
        for j in range(i + 1, d):
            e = eye[i] + eye[j]
            f = eye[i] - eye[j]
            h = (V(x + e) - V(x + f) - V(x - f) + V(x - e)) / (4.0 * step**2)
            hess[:, i, j] = hess[:, j, i] = h
    uu = u(x)
    sig = problem.diffusion(x, uu)
    a = np.einsum("bik,bjk->bij", sig, sig)
    drift = np.asarray(problem.drift(x, uu))
    f = np.asarray(problem.running_cost(x, uu))
    return 0.5 * np.einsum("bij,bij->b", a, hess) + np.sum(drift * grad, axis=1) + f - problem.gamma * v0


def hamiltonian(problem: Problem, x, u, grad, hess) -> np.ndarray:
    """``1/2 Tr(s s^T H) + b . grad + f`` for given derivative data."""
    sig = problem.diffusion(x, u)
    a = np.einsum("bik,bjk->bij", sig, sig)
    return (0.5 * np.einsum("bij,bij->b", a, hess) + np.sum(np.asarray(problem.drift(x, u)) * grad, axis=1)
            + np.asarray(problem.running_cost(x, u)))
