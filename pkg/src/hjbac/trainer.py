"""Alternating critic/actor training with Adam, validation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ContractViolation, NumericFailure
from .losses import TD_VARIANTS, LossReport, actor_loss, critic_loss
from .networks import NetworkSet, network_records, networks_from_records, read_arrays, write_arrays
from .problems import PROBLEMS, Problem, make_problem, sample_boundary, sample_initial
from .rollout import SCHEMES, SchemeConfig, rollout

log = logging.getLogger(__name__)

TRUNCATION_WARN = 0.05
# reserved iteration keys for the validation set and the network initialisation
_VALIDATION_KEY = 2**32 - 1
_INIT_KEY = 2**32 - 2


def _stream(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class TrainConfig:
    """Run configuration. ``None`` fields take dimension-dependent defaults.

    Defaults: ``N = 50``, ``batch = 1024`` and ``depth = 2`` below ten
    dimensions, otherwise ``N = 100``, ``batch = 2048``, ``depth = 3``; the
    first learning-rate stage lasts 20000 iterations up to ten dimensions and
    30000 above.
    """

    problem: str = "lqr"
    dim: int = 5
    constants: dict = field(default_factory=dict)
    scheme: str = "adaptive"
    td: str = "vr-lstd"
    T: float = 0.2
    N: int | None = None
    batch: int | None = None
    eta: float = 1.0
    width: int = 200
    depth: int | None = None
    lr: tuple = (1e-3, 1e-4, 1e-5)
    iters: tuple | None = None
    seed: int = 0
    eval_every: int = 100
    grad_through_h: bool = False
    control_head: str | None = None
    penalty_weight: float = 0.0
    min_step_factor: float = 1e-4
    cap_factor: int = 16

    def resolved(self) -> "TrainConfig":
        """Copy with every default filled in and the fields validated."""
        small = self.dim < 10
        cfg = replace(
            self,
            constants=dict(self.constants),
            N=self.N if self.N is not None else (50 if small else 100),
            batch=self.batch if self.batch is not None else (1024 if small else 2048),
            depth=self.depth if self.depth is not None else (2 if small else 3),
            iters=tuple(int(i) for i in self.iters) if self.iters is not None
            else ((20000 if self.dim <= 10 else 30000), 10000, 10000),
            lr=tuple(float(v) for v in self.lr),
        )
        if cfg.control_head is None:
            cfg.control_head = "unit-ball" if cfg.problem == "eikonal" and not cfg.penalty_weight else "unconstrained"
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ContractViolation(f"unknown problem {self.problem!r}")
        if self.scheme not in SCHEMES:
            raise ContractViolation(f"unknown scheme {self.scheme!r}")
        if self.td not in TD_VARIANTS:
            raise ContractViolation(f"unknown TD variant {self.td!r}")
        if self.T <= 0 or self.N < 1 or self.batch < 1:
            raise ContractViolation("need T > 0, N >= 1 and batch >= 1")
        if len(self.iters) != len(self.lr) or any(i < 0 for i in self.iters):
            raise ContractViolation("iteration stages must be non-negative and match the learning rates")
        if self.eval_every < 1:
            raise ContractViolation("eval_every must be positive")

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iters))

    def learning_rate(self, iteration: int) -> float:
        """Piecewise-constant rate for the 0-based ``iteration``."""
        edge = 0
        for n, rate in zip(self.iters, self.lr):
            edge += n
            if iteration < edge:
                return rate
        return self.lr[-1]

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig(self.scheme, self.T, self.N, self.min_step_factor, self.cap_factor)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lr"] = list(self.lr)
        out["iters"] = list(self.iters) if self.iters is not None else None
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in names}
        for key in ("lr", "iters"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def build_problem(self) -> Problem:
        return make_problem(self.problem, self.dim, **self.constants)


@dataclass
class MetricsRecord:
    iteration: int
    err_v: float
    err_u: float
    critic_loss: float
    boundary_loss: float
    actor_loss: float
    truncation_rate: float

    def row(self) -> list:
        return [self.iteration, self.err_v, self.err_u, self.critic_loss, self.boundary_loss,
                self.actor_loss, self.truncation_rate]


CURVE_COLUMNS = ["iter", "err_v", "err_u", "critic_loss", "boundary_loss", "actor_loss", "truncation_rate"]


def relative_l2(exact: np.ndarray, approx: np.ndarray) -> float:
    exact = np.asarray(exact, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    denom = np.sum(exact**2)
    if denom == 0.0:
        raise ContractViolation("relative error undefined: exact field vanishes on the validation set")
    return float(np.sqrt(np.sum((exact - approx) ** 2) / denom))


def validate(nets: NetworkSet, problem: Problem, points) -> tuple[float, float]:
    """Relative L2 errors ``(err_V, err_u)`` of the networks on ``points``."""
    if not problem.has_exact:
        raise ContractViolation(f"{problem.name} has no exact solution to validate against")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    err_v = relative_l2(problem.exact_value(points), nets.value(points))
    err_u = relative_l2(problem.exact_control(points), nets.control(points))
    return err_v, err_u


class Trainer:
    """Runs the alternating critic and actor updates for one configuration.

    Randomness is keyed by ``(seed, iteration, phase)``, so the work done at
    iteration ``i`` depends only on the parameters entering it. That makes a
    resumed run continue exactly where the saved one stopped.
    """

    def __init__(self, cfg: TrainConfig, checkpoint_path=None):
        self.cfg = cfg.resolved()
        self.problem = self.cfg.build_problem()
        self.scheme = self.cfg.scheme_config()
        self.nets = NetworkSet.build(
            self.problem.dim, self.problem.control_dim, self.cfg.td, self.cfg.control_head,
            self.cfg.width, self.cfg.depth, _stream(self.cfg.seed, _INIT_KEY, 0),
        )
        self.adam = {name: AdamState.zeros(net.params.size) for name, net in self.nets.nets().items()}
        self.validation_points = sample_initial(
            self.problem.domain, self.problem.dim, self.cfg.batch, _stream(self.cfg.seed, _VALIDATION_KEY, 0)
        )
        self.iteration = 0
        self.history: list[MetricsRecord] = []
        self.last_report = LossReport()
        self.checkpoint_path = checkpoint_path

    # -- one iteration
    def _critic_step(self, lr: float):
        cfg, pb = self.cfg, self.problem
        rng = _stream(cfg.seed, self.iteration, 0)
        x0 = sample_initial(pb.domain, pb.dim, cfg.batch, rng)
        boundary = sample_boundary(pb.domain, pb.dim, cfg.batch, rng)
        batch = rollout(pb, self.nets.control, x0, self.scheme, rng)
        td_loss, b_loss, grads = critic_loss(batch, boundary, pb, self.nets, cfg.eta, cfg.td)
        for name, g in grads.items():
            ad.adam_step(self.nets.nets()[name].params, g, self.adam[name], lr)
        norms = {name: float(np.linalg.norm(g)) for name, g in grads.items()}
        return td_loss, b_loss, batch.truncation_rate, norms

    def _actor_step(self, lr: float):
        cfg, pb = self.cfg, self.problem
        rng = _stream(cfg.seed, self.iteration, 1)
        x0 = sample_initial(pb.domain, pb.dim, cfg.batch, rng)
        penalty_points = x0 if cfg.penalty_weight else None
        loss, grad, info = actor_loss(pb, self.nets, x0, self.scheme, rng, cfg.grad_through_h,
                                      cfg.penalty_weight, penalty_points, return_tape=True)
        ad.adam_step(self.nets.control_net.params, grad, self.adam["control"], lr)
        return loss, float(np.linalg.norm(grad)), info["rollout"].truncation_rate

    def _snapshot(self):
        return ([net.params.values.copy() for net in self.nets.nets().values()],
                {k: s.copy() for k, s in self.adam.items()})

    def _restore(self, snap) -> None:
        values, adam = snap
        for net, v in zip(self.nets.nets().values(), values):
            net.params.values[:] = v
        self.adam = adam

    def step(self) -> LossReport:
        """Run one critic update and one actor update."""
        lr = self.cfg.learning_rate(self.iteration)
        snap = self._snapshot()
        try:
            td_loss, b_loss, trunc_c, norms = self._critic_step(lr)
            a_loss, a_norm, trunc_a = self._actor_step(lr)
        except NumericFailure as exc:
            self._restore(snap)
            if self.checkpoint_path is not None:
                self.save(self.checkpoint_path)
            raise NumericFailure(f"iteration {self.iteration}: {exc}", exc.node_index) from exc
        norms["control"] = a_norm
        rate = max(trunc_c, trunc_a)
        if rate > TRUNCATION_WARN:
            warnings.warn(f"iteration {self.iteration}: {rate:.1%} of paths hit the step cap", RuntimeWarning)
        self.iteration += 1
        self.last_report = LossReport(td_loss, b_loss, a_loss, norms, rate)
        return self.last_report

    # -- evaluation
    def evaluate(self) -> MetricsRecord:
        if self.problem.has_exact:
            err_v, err_u = validate(self.nets, self.problem, self.validation_points)
        else:
            err_v = err_u = float("nan")
        rep = self.last_report
        rec = MetricsRecord(self.iteration, err_v, err_u, rep.critic_loss, rep.boundary_loss,
                            rep.actor_loss, rep.truncation_rate)
        return rec

    def run(self, until: int | None = None, callback=None) -> list[MetricsRecord]:
        """Train up to iteration ``until`` (default: the full schedule).

        A record is appended every ``eval_every`` completed iterations and at
        the end of the schedule, so a run stopped early and resumed produces
        the same history as an uninterrupted one. ``callback(trainer, record)``
        is called per record.
        """
        total = self.cfg.total_iterations if until is None else min(int(until), self.cfg.total_iterations)
        while self.iteration < total:
            self.step()
            if self.iteration % self.cfg.eval_every == 0 or self.iteration == self.cfg.total_iterations:
                rec = self.evaluate()
                self.history.append(rec)
                log.info("iter %d err_v %.4g err_u %.4g", rec.iteration, rec.err_v, rec.err_u)
                if callback is not None:
                    callback(self, rec)
        return self.history

    # -- checkpoints
    def save(self, path) -> None:
        meta = {
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "history": [asdict(r) for r in self.history],
            "last_report": asdict(self.last_report),
            "adam_steps": {k: s.step_count for k, s in self.adam.items()},
        }
        records = network_records(self.nets)
        for name, state in self.adam.items():
            records.append(({"kind": "adam", "name": name, "moment": "m"}, state.m))
            records.append(({"kind": "adam", "name": name, "moment": "v"}, state.v))
        write_arrays(path, meta, records)

    @classmethod
    def load(cls, path, checkpoint_path=None) -> "Trainer":
        meta, records = read_arrays(path)
        cfg = TrainConfig.from_dict(meta["config"])
        trainer = cls(cfg, checkpoint_path)
        if trainer.cfg.config_hash() != meta["config_hash"]:
            raise ContractViolation("checkpoint config hash does not match its stored config")
        trainer.nets = networks_from_records(records)
        for info, arr in records:
            if info.get("kind") == "adam":
                state = trainer.adam[info["name"]]
                getattr(state, info["moment"])[:] = arr
        for name, steps in meta["adam_steps"].items():
            trainer.adam[name].step_count = int(steps)
        trainer.iteration = int(meta["iteration"])
        trainer.history = [MetricsRecord(**r) for r in meta["history"]]
        trainer.last_report = LossReport(**meta["last_report"])
        return trainer


def train(cfg: TrainConfig, checkpoint_path=None, callback=None) -> tuple[NetworkSet, list[MetricsRecord]]:
    """Train from scratch; returns the networks and the metrics history."""
    trainer = Trainer(cfg, checkpoint_path)
    history = trainer.run(callback=callback)
    return trainer.nets, history
