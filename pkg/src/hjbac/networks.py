"""Residual MLPs for the value, value-gradient and control fields."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, ParamVector

CONTROL_DELTA = 1e-15
# |u_dir| is inflated by a few ulps so rounding can never push |u| above 1
NORM_PAD = 1.0 + 4.0 * np.finfo(np.float64).eps
HEADS = ("unconstrained", "unit-ball")

MAGIC = b"HJBAC\x00\x01\x00"


class ResidualMLP:
    """``F_l o s o ... o s o F_0`` with ``s(x) = x + relu(x)`` and constant width.

    ``depth`` counts hidden layers; ``depth=0`` is a single affine map.
    Weights are stored as ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    def __init__(self, in_dim: int, out_dim: int, width: int = 200, depth: int = 2,
                 rng: np.random.Generator | None = None, name: str = "net", params=None):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.width = int(width)
        self.depth = int(depth)
        self.name = name
        dims = [self.in_dim] + [self.width] * self.depth + [self.out_dim]
        shapes = []
        for i in range(self.depth + 1):
            shapes.append((f"W{i}", (dims[i], dims[i + 1])))
            shapes.append((f"b{i}", (dims[i + 1],)))
        self.params = ParamVector(shapes)
        if params is not None:
            self.params.values[:] = params
        elif rng is not None:
            for i in range(self.depth + 1):
                bound = 1.0 / np.sqrt(dims[i])
                self.params.view(f"W{i}")[:] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))

    def forward(self, x, weights=None):
        """Evaluate on a batch ``x`` of shape (B, in_dim).

        ``weights`` maps layer names to arrays or tape nodes; by default the
        current parameter values are used and plain numpy is returned.
        """
        if np.shape(ad.value_of(x))[-1] != self.in_dim:
            raise ContractViolation(
                f"{self.name}: expected input dim {self.in_dim}, got {np.shape(ad.value_of(x))}"
            )
        w = self.params.views() if weights is None else weights
        h = x
        for i in range(self.depth):
            h = ad.skip_relu(ad.affine(h, w[f"W{i}"], w[f"b{i}"]))
        return ad.affine(h, w[f"W{self.depth}"], w[f"b{self.depth}"])

    __call__ = forward

    def header(self) -> dict:
        return {"name": self.name, "depth": self.depth, "width": self.width,
                "in_dim": self.in_dim, "out_dim": self.out_dim}


def eval_value(net: ResidualMLP, x, weights=None):
    """Scalar field: returns shape (B,)."""
    out = net.forward(x, weights)
    return ad.reshape(out, (-1,))


def unit_ball_head(raw):
    """Map ``(u_len, u_dir)`` rows to ``u_dir / (delta + relu(u_len) + |u_dir|)``."""
    u_len = raw[:, 0]
    u_dir = raw[:, 1:]
    denom = ad.add(ad.add(ad.relu(u_len), ad.mul(NORM_PAD, ad.norm(u_dir))), CONTROL_DELTA)
    return ad.div(u_dir, ad.reshape(denom, (-1, 1)))


def eval_control(net: ResidualMLP, head: str, x, weights=None):
    raw = net.forward(x, weights)
    if head == "unconstrained":
        return raw
    if head == "unit-ball":
        return unit_ball_head(raw)
    raise ContractViolation(f"unknown control head {head!r}")


@dataclass
class NetworkSet:
    value_net: ResidualMLP
    control_net: ResidualMLP
    grad_net: ResidualMLP | None = None
    control_head: str = "unconstrained"

    @classmethod
    def build(cls, dim: int, control_dim: int, td: str = "vr-lstd", head: str = "unconstrained",
              width: int = 200, depth: int = 2, rng: np.random.Generator | None = None):
        if head not in HEADS:
            raise ContractViolation(f"unknown control head {head!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        value = ResidualMLP(dim, 1, width, depth, rng, name="value")
        grad = ResidualMLP(dim, dim, width, depth, rng, name="grad") if td == "vr-lstd" else None
        out = control_dim + 1 if head == "unit-ball" else control_dim
        control = ResidualMLP(dim, out, width, depth, rng, name="control")
        return cls(value, control, grad, head)

    def nets(self) -> dict[str, ResidualMLP]:
        out = {"value": self.value_net}
        if self.grad_net is not None:
            out["grad"] = self.grad_net
        out["control"] = self.control_net
        return out

    def value(self, x, weights=None):
        return eval_value(self.value_net, x, weights)

    def gradient(self, x, weights=None):
        if self.grad_net is None:
            raise ContractViolation("no gradient network in this set (LSTD critic)")
        return self.grad_net.forward(x, weights)

    def control(self, x, weights=None):
        return eval_control(self.control_net, self.control_head, x, weights)

    def copy(self) -> "NetworkSet":
        def dup(net):
            if net is None:
                return None
            return ResidualMLP(net.in_dim, net.out_dim, net.width, net.depth,
                               name=net.name, params=net.params.values)
        return NetworkSet(dup(self.value_net), dup(self.control_net), dup(self.grad_net),
                          self.control_head)


# ---------------------------------------------------------------- file format
#
# offset 0   8 bytes   magic b"HJBAC\0\1\0"
# offset 8   u32 LE    header length H
# offset 12  H bytes   UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "count", ...}, ...]}
# then       float64 LE arrays, concatenated in header order, no padding


def write_arrays(path, meta: dict, arrays: list[tuple[dict, np.ndarray]]) -> None:
    """Atomically write the container: temp file then rename."""
    entries = []
    for info, arr in arrays:
        entry = dict(info)
        entry["count"] = int(np.size(arr))
        entries.append(entry)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_arrays(path) -> tuple[dict, list[tuple[dict, np.ndarray]]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    out = []
    for entry in header["arrays"]:
        n = entry["count"]
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        out.append((entry, arr))
    return header["meta"], out


def network_records(nets: NetworkSet) -> list[tuple[dict, np.ndarray]]:
    records = []
    for net in nets.nets().values():
        info = {"kind": "net", "head": nets.control_head if net.name == "control" else None}
        info.update(net.header())
        records.append((info, net.params.values))
    return records


def networks_from_records(records) -> NetworkSet:
    nets = {}
    head = "unconstrained"
    for info, arr in records:
        if info.get("kind") != "net":
            continue
        nets[info["name"]] = ResidualMLP(info["in_dim"], info["out_dim"], info["width"],
                                         info["depth"], name=info["name"], params=arr)
        if info["name"] == "control" and info.get("head"):
            head = info["head"]
    return NetworkSet(nets["value"], nets["control"], nets.get("grad"), head)


def save_networks(path, nets: NetworkSet, meta: dict | None = None) -> None:
    write_arrays(path, meta or {}, network_records(nets))


def load_networks(path) -> NetworkSet:
    _, records = read_arrays(path)
    return networks_from_records(records)
