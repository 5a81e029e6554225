"""Command-line front end: ``hjbac train | density | compare``.

Every long flag can also be given in an INI file passed with ``--config``.
Section names are free (``[trainer]``, ``[problems]`` ...); keys are the
flag names with or without dashes, e.g. ``iters-stage1 = 8000``. Flags on
the command line win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import subprocess
import sys
import time
import warnings
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .autodiff import ContractViolation, NumericFailure
from .problems import PROBLEMS, make_problem, sample_initial
from .rollout import SCHEMES, write_trajectories_csv, rollout
from .losses import TD_VARIANTS
from .networks import read_arrays, networks_from_records
from .trainer import CURVE_COLUMNS, TrainConfig, Trainer, _stream

log = logging.getLogger("hjbac")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_FAILURE = 1

PROBLEM_CONSTANTS = {
    # flag: (config key, help)
    "p": ("p", "state cost weight (lqr, nclqr)"),
    "q": ("q", "control cost weight"),
    "beta": ("beta", "control gain in the drift (lqr, nclqr)"),
    "gamma": ("gamma", "discount rate"),
    "R": ("R", "ball radius"),
    "a": ("a", "quadratic weight (vdp)"),
    "epsilon": ("epsilon", "coupling (vdp) or diffusion slope (nclqr)"),
    "a2": ("a2", "quadratic coefficient (eikonal)"),
    "a3": ("a3", "cubic coefficient (eikonal)"),
    "u-max": ("u_max", "control bound used for the diffusion bound (nclqr)"),
}

DENSITY_BINS = 100
DENSITY_MIN_SAMPLES = 1000


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])


def artifact_version() -> str:
    """Package version, suffixed with the git commit when available."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5, check=False).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+g{rev}" if rev else __version__


# ---------------------------------------------------------------- parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(p: argparse.ArgumentParser, required_problem: bool = True) -> None:
    p.add_argument("--config", help="INI file with defaults for any flag")
    p.add_argument("--problem", choices=PROBLEMS, required=required_problem)
    p.add_argument("--dim", type=int, required=required_problem)
    p.add_argument("--scheme", choices=SCHEMES, default="adaptive")
    p.add_argument("--td", choices=TD_VARIANTS, default="vr-lstd")
    p.add_argument("--T", type=float, default=0.2, help="time horizon")
    p.add_argument("--N", type=int, default=None, help="intervals per horizon (default by dimension)")
    p.add_argument("--batch", type=int, default=None, help="paths per batch (default by dimension)")
    p.add_argument("--eta", type=float, default=1.0, help="boundary penalty weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters-stage1", type=int, default=None)
    p.add_argument("--iters-stage2", type=int, default=10000)
    p.add_argument("--iters-stage3", type=int, default=10000)
    p.add_argument("--lr", type=float, nargs=3, default=[1e-3, 1e-4, 1e-5], metavar=("LR1", "LR2", "LR3"))
    p.add_argument("--width", type=int, default=200)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--grad-through-h", choices=("on", "off"), default="off",
                   help="also differentiate the actor loss through adaptive step sizes (noisy)")
    p.add_argument("--control-head", choices=("unconstrained", "unit-ball"), default=None)
    p.add_argument("--penalty-weight", type=float, default=0.0,
                   help="norm penalty for the control instead of the unit-ball head")
    p.add_argument("--out-dir", default=".")
    for flag, (_, text) in PROBLEM_CONSTANTS.items():
        p.add_argument(f"--{flag}", type=float, default=None, help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hjbac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="train one configuration")
    _add_run_flags(tr)
    tr.add_argument("--resume", help="checkpoint to continue from; its stored configuration is used")
    tr.add_argument("--debug-dump-traj", type=int, default=0, metavar="K",
                    help="write the first K paths of a final rollout to trajectories.csv")

    de = sub.add_parser("density", help="histogram exact and learned values at uniform points")
    de.add_argument("--config")
    de.add_argument("--checkpoint", required=True)
    de.add_argument("--samples", type=int, default=100000)
    de.add_argument("--seed", type=int, default=0)
    de.add_argument("--out-dir", default=".")

    co = sub.add_parser("compare", help="run a grid of schemes/TD variants or horizons")
    _add_run_flags(co)
    co.add_argument("--grid", choices=("scheme-td", "horizon"), default="scheme-td")
    co.add_argument("--schemes", nargs="+", choices=SCHEMES, default=list(SCHEMES))
    co.add_argument("--tds", nargs="+", choices=TD_VARIANTS, default=list(TD_VARIANTS))
    co.add_argument("--horizons", nargs="+", type=float, default=[0.04, 0.1, 0.2, 0.4, 0.8])
    return parser


def _config_defaults(path: str, parser: argparse.ArgumentParser) -> dict:
    ini = configparser.ConfigParser()
    ini.optionxform = str  # keys such as T, N and R are case sensitive
    if not ini.read(path):
        raise UsageError(f"cannot read config file {path!r}")
    known = {a.dest: a for a in parser._actions}
    out = {}
    for section in ini.sections():
        for key, raw in ini.items(section):
            dest = key.replace("-", "_")
            if dest not in known:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            action = known[dest]
            try:
                if action.nargs not in (None, 0):
                    out[dest] = [action.type(v) if action.type else v for v in raw.split()]
                else:
                    out[dest] = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key!r}: {exc}") from exc
            if action.choices is not None:
                vals = out[dest] if isinstance(out[dest], list) else [out[dest]]
                if any(v not in action.choices for v in vals):
                    raise UsageError(f"{path}: {key!r} must be one of {sorted(action.choices)}")
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("--resume")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.resume and command == "train":
        # the run configuration comes from the checkpoint
        for action in subparsers["train"]._actions:
            action.required = False
    if known.config and command in subparsers:
        sub = subparsers[command]
        defaults = _config_defaults(known.config, sub)
        sub.set_defaults(**defaults)
        # required flags may come from the file
        for action in sub._actions:
            if action.required and action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def config_from_args(ns: argparse.Namespace) -> TrainConfig:
    constants = {}
    for flag, (key, _) in PROBLEM_CONSTANTS.items():
        value = getattr(ns, flag.replace("-", "_"))
        if value is not None:
            constants[key] = value
    stage1 = ns.iters_stage1
    if stage1 is None:
        stage1 = 20000 if ns.dim <= 10 else 30000
    cfg = TrainConfig(
        problem=ns.problem, dim=ns.dim, constants=constants, scheme=ns.scheme, td=ns.td, T=ns.T,
        N=ns.N, batch=ns.batch, eta=ns.eta, width=ns.width, depth=ns.depth, lr=tuple(ns.lr),
        iters=(stage1, ns.iters_stage2, ns.iters_stage3), seed=ns.seed, eval_every=ns.eval_every,
        grad_through_h=ns.grad_through_h == "on", control_head=ns.control_head,
        penalty_weight=ns.penalty_weight,
    )
    try:
        cfg = cfg.resolved()
        cfg.build_problem()
    except ContractViolation as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------- commands


class Manifest:
    """Run summary, written once when the command finishes or aborts."""

    def __init__(self, out_dir: str, command: str, config: dict | None, seed: int):
        self.path = os.path.join(out_dir, "manifest.json")
        self.started = time.time()
        self.data = {
            "command": command,
            "version": artifact_version(),
            "config": config,
            "seed": seed,
            "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "status": "running",
            "failure_reason": None,
            "final_err_v": None,
            "final_err_u": None,
            "outputs": [],
        }

    def add_output(self, path: str) -> None:
        name = os.path.basename(path)
        if name not in self.data["outputs"]:
            self.data["outputs"].append(name)

    def finish(self, status: str, reason: str | None = None) -> None:
        self.data["status"] = status
        self.data["failure_reason"] = reason
        self.data["wall_clock_seconds"] = round(time.time() - self.started, 3)
        self.add_output(self.path)
        tmp = self.path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.path)


def _write_curve(path, history) -> None:
    write_csv(path, CURVE_COLUMNS, [r.row() for r in history])


def cmd_train(ns: argparse.Namespace) -> int:
    os.makedirs(ns.out_dir, exist_ok=True)
    ckpt = os.path.join(ns.out_dir, "checkpoint.bin")
    curve = os.path.join(ns.out_dir, "training_curve.csv")
    manifest = Manifest(ns.out_dir, "train", None, ns.seed)
    try:
        if ns.resume:
            trainer = Trainer.load(ns.resume, checkpoint_path=ckpt)
        else:
            trainer = Trainer(config_from_args(ns), checkpoint_path=ckpt)
    except BaseException as exc:
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    cfg = trainer.cfg
    manifest.data.update(config=cfg.to_dict(), seed=cfg.seed, config_hash=cfg.config_hash())

    def on_record(tr, rec):
        # keep a resumable state next to the curve
        _write_curve(curve, tr.history)
        tr.save(ckpt)

    try:
        trainer.run(callback=on_record)
        _write_curve(curve, trainer.history)
        manifest.add_output(curve)
        trainer.save(ckpt)
        manifest.add_output(ckpt)
        if ns.debug_dump_traj:
            pb = trainer.problem
            rng = _stream(cfg.seed, trainer.iteration, 2)
            x0 = sample_initial(pb.domain, pb.dim, ns.debug_dump_traj, rng)
            batch = rollout(pb, trainer.nets.control, x0, trainer.scheme, rng)
            path = os.path.join(ns.out_dir, "trajectories.csv")
            write_trajectories_csv(path, batch)
            manifest.add_output(path)
    except NumericFailure as exc:
        _write_curve(curve, trainer.history)
        manifest.add_output(curve)
        if os.path.exists(ckpt):
            manifest.add_output(ckpt)
        manifest.finish("numeric-failure", str(exc))
        print(f"hjbac: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException as exc:
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    if trainer.history:
        manifest.data["final_err_v"] = trainer.history[-1].err_v
        manifest.data["final_err_u"] = trainer.history[-1].err_u
    manifest.data["iterations"] = trainer.iteration
    manifest.finish("completed")
    return EXIT_OK


def density_table(exact: np.ndarray, learned: np.ndarray, bins: int = DENSITY_BINS):
    """Shared-bin normalised histograms: ``(centers, exact_density, learned_density)``."""
    exact = np.asarray(exact, dtype=np.float64)
    learned = np.asarray(learned, dtype=np.float64)
    lo = min(exact.min(), learned.min())
    hi = max(exact.max(), learned.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    true_d, _ = np.histogram(exact, bins=edges, density=True)
    learned_d, _ = np.histogram(learned, bins=edges, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, true_d, learned_d


def cmd_density(ns: argparse.Namespace) -> int:
    os.makedirs(ns.out_dir, exist_ok=True)
    manifest = Manifest(ns.out_dir, "density", None, ns.seed)
    try:
        meta, records = read_arrays(ns.checkpoint)
        if "config" not in meta:
            raise UsageError(f"{ns.checkpoint}: no run configuration stored in this checkpoint")
        cfg = TrainConfig.from_dict(meta["config"])
        manifest.data["config"] = cfg.to_dict()
        nets = networks_from_records(records)
        problem = make_problem(cfg.problem, cfg.dim, **cfg.constants)
        if ns.samples < DENSITY_MIN_SAMPLES:
            warnings.warn(f"only {ns.samples} samples: density estimate will be noisy", RuntimeWarning)
        if ns.samples < 1:
            raise UsageError("--samples must be positive")
        x = sample_initial(problem.domain, problem.dim, ns.samples, np.random.default_rng(ns.seed))
        centers, true_d, learned_d = density_table(problem.exact_value(x), nets.value(x))
        path = os.path.join(ns.out_dir, "density.csv")
        write_csv(path, ["bin_center", "true_density", "learned_density"], zip(centers, true_d, learned_d))
        manifest.add_output(path)
    except BaseException as exc:
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    manifest.finish("completed")
    return EXIT_OK


def cmd_compare(ns: argparse.Namespace) -> int:
    os.makedirs(ns.out_dir, exist_ok=True)
    manifest = Manifest(ns.out_dir, "compare", None, ns.seed)
    try:
        base = config_from_args(ns)
    except UsageError as exc:
        manifest.finish("failed", f"usage: {exc}")
        raise
    manifest.data["config"] = base.to_dict()
    if ns.grid == "scheme-td":
        header = ["scheme", "td", "err_v", "err_u"]
        cells = [((s, t), {"scheme": s, "td": t}) for s in ns.schemes for t in ns.tds]
    else:
        header = ["T", "N", "err_v", "err_u"]
        cells = [((T, base.N), {"T": T}) for T in ns.horizons]
    rows = []
    path = os.path.join(ns.out_dir, "compare.csv")
    try:
        for key, changes in cells:
            cfg = TrainConfig.from_dict({**base.to_dict(), **changes})
            log.info("compare cell %s", key)
            trainer = Trainer(cfg)
            history = trainer.run()
            if history:
                rec = history[-1]
            else:
                rec = trainer.evaluate()
            rows.append([*key, rec.err_v, rec.err_u])
            write_csv(path, header, rows)
        write_csv(path, header, rows)
        manifest.add_output(path)
    except NumericFailure as exc:
        write_csv(path, header, rows)
        manifest.add_output(path)
        manifest.finish("numeric-failure", str(exc))
        print(f"hjbac: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException as exc:
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    manifest.data["cells"] = len(rows)
    manifest.finish("completed")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "density": cmd_density, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        ns = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"hjbac: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"hjbac: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
