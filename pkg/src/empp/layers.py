"""Equivariant layers and a small CG-convolution backbone.

Node features are stored per degree as channel-last arrays of shape
``(N, 2l+1, C_l)``; a ``Features`` value maps each degree to a tape node.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Parameter, Tape
from .so3 import IrrepsLayout, LayoutError, SteerableTensor, cg_paths, real_cg, spherical_harmonics

log = logging.getLogger(__name__)

Features = dict[int, Node]
N_ELEMENTS = 118
NORM_EPS = 1e-8


class Module:
    """Parameter container; subclasses register parameters and children by attribute."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()

        def visit(obj):
            if isinstance(obj, Parameter):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    out.append(obj)
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    visit(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    visit(v)
            elif isinstance(obj, dict):
                for k in sorted(obj, key=str):
                    visit(obj[k])

        visit(self)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.value[...] = value


def _normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(scale=1.0 / math.sqrt(max(fan_in, 1)), size=shape)


# --------------------------------------------------------------------------
# SteerableTensor <-> Features
# --------------------------------------------------------------------------


def features_from_tensors(tape: Tape, tensors: list[SteerableTensor]) -> Features:
    """Stack per-node steerable tensors (same layout) into channel-last features."""
    layout = tensors[0].layout
    out = {}
    for l in layout.degrees():
        arr = np.stack([t.by_degree()[l].T for t in tensors])  # (N, 2l+1, C)
        out[l] = tape.constant(arr)
    return out


def tensors_from_features(feats: Features | dict[int, np.ndarray]) -> list[SteerableTensor]:
    arrays = {l: (f.value if isinstance(f, Node) else f) for l, f in feats.items()}
    n = next(iter(arrays.values())).shape[0]
    return [
        SteerableTensor.from_degrees({l: arrays[l][i].T for l in sorted(arrays)})
        for i in range(n)
    ]


def rotate_features(feats: dict[int, np.ndarray], wigner: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Apply ``D^l`` to the ``m`` axis of every degree block."""
    return {l: np.einsum("mk,nkc->nmc", wigner[l], x) if l > 0 else x.copy() for l, x in feats.items()}


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class EquiLinear(Module):
    """Channel mixing inside each degree; bias only on degree 0."""

    def __init__(self, name: str, mults_in: dict[int, int], mults_out: dict[int, int], rng, bias: bool = True):
        for l in mults_out:
            if mults_in.get(l, 0) == 0:
                raise LayoutError(f"{name}: output degree {l} has no input channels")
        self.mults_in = dict(mults_in)
        self.mults_out = dict(mults_out)
        self.weights = {
            l: Parameter(f"{name}.w{l}", _normal(rng, (mults_in[l], c), mults_in[l]))
            for l, c in mults_out.items()
        }
        self.bias = Parameter(f"{name}.b0", np.zeros(mults_out[0])) if bias and 0 in mults_out else None

    def __call__(self, tape: Tape, x: Features) -> Features:
        out = {}
        for l, w in self.weights.items():
            if x[l].shape[-1] != w.shape[0]:
                raise LayoutError(f"{w.name}: expects {w.shape[0]} channels, got {x[l].shape[-1]}")
            out[l] = tape.linear(x[l], w, self.bias if l == 0 else None)
        return out


def gate_layout(mults: dict[int, int]) -> dict[int, int]:
    """Input multiplicities a gate needs to produce ``mults``: one extra scalar per l>0 channel."""
    out = dict(mults)
    out[0] = mults.get(0, 0) + sum(c for l, c in mults.items() if l > 0)
    return out


def gate(tape: Tape, x: Features, mults_out: dict[int, int]) -> Features:
    """SiLU on scalars; every l>0 channel times the sigmoid of its own gate scalar."""
    n_scalar = mults_out.get(0, 0)
    n_gates = sum(c for l, c in mults_out.items() if l > 0)
    if x[0].shape[-1] != n_scalar + n_gates:
        raise LayoutError(
            f"gate expects {n_scalar} scalars + {n_gates} gate scalars, got {x[0].shape[-1]}"
        )
    out = {}
    if n_scalar:
        out[0] = tape.silu(x[0][:, :, :n_scalar])
    start = n_scalar
    for l in sorted(k for k in mults_out if k > 0):
        c = mults_out[l]
        g = tape.sigmoid(x[0][:, :, start : start + c])  # (N, 1, c)
        out[l] = tape.mul(x[l], tape.broadcast_to(g, x[l].shape))
        start += c
    return out


class EquiNorm(Module):
    """Per degree: divide by the RMS over channels of the block norms, then scale.

    Degree-0 channels are mean-centred first. The affine factor has no bias.
    """

    def __init__(self, name: str, mults: dict[int, int]):
        self.affine = {l: Parameter(f"{name}.a{l}", np.ones(c)) for l, c in mults.items()}

    def __call__(self, tape: Tape, x: Features) -> Features:
        out = {}
        for l, f in x.items():
            if l == 0:
                mu = tape.mean(f, axis=2, keepdims=True)
                f = tape.sub(f, tape.broadcast_to(mu, f.shape))
            sq = tape.sum(tape.mul(f, f), axis=1)  # (N, C)
            rms = tape.sqrt(tape.mean(sq, axis=1, keepdims=True))  # (N, 1)
            denom = tape.reshape(tape.add(rms, tape.constant(NORM_EPS)), (f.shape[0], 1, 1))
            y = tape.div(f, tape.broadcast_to(denom, f.shape))
            a = tape.reshape(tape.param(self.affine[l]), (1, 1, f.shape[2]))
            out[l] = tape.mul(y, tape.broadcast_to(a, f.shape))
        return out


class AtomEmbedding(Module):
    def __init__(self, name: str, dim: int, rng):
        # row 0 is unused; atomic number z indexes row z
        self.table = Parameter(f"{name}.table", rng.normal(size=(N_ELEMENTS + 1, dim)))

    def __call__(self, tape: Tape, z) -> Node:
        z = np.asarray(z, dtype=np.int64)
        if z.size and (z.min() < 1 or z.max() > N_ELEMENTS):
            raise ValueError(f"atomic numbers must lie in [1, {N_ELEMENTS}]")
        return tape.gather(tape.param(self.table), z)


class MLP(Module):
    """Dense layers with SiLU between them."""

    def __init__(self, name: str, sizes: list[int], rng, bias: bool = True):
        self.w = [Parameter(f"{name}.w{i}", _normal(rng, (a, b), a)) for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.b = [Parameter(f"{name}.b{i}", np.zeros(b)) for i, b in enumerate(sizes[1:])] if bias else None

    def __call__(self, tape: Tape, x: Node) -> Node:
        for i, w in enumerate(self.w):
            x = tape.linear(x, w, self.b[i] if self.b else None)
            if i < len(self.w) - 1:
                x = tape.silu(x)
        return x


def gaussian_basis(x, start: float, stop: float, n: int) -> np.ndarray:
    """``exp(-((x - mu_k) / w)^2 / 2)`` with ``n`` centres on ``[start, stop]``, width = spacing."""
    centers = np.linspace(start, stop, n)
    width = (stop - start) / (n - 1)
    x = np.asarray(x, dtype=np.float64)[..., None]
    return np.exp(-0.5 * ((x - centers) / width) ** 2)


# --------------------------------------------------------------------------
# backbone
# --------------------------------------------------------------------------


@dataclass
class BackboneConfig:
    layers: int = 3
    hidden: str = "64x0+32x1+16x2+8x3"
    cutoff: float = 5.0
    n_radial: int = 16
    radial_hidden: int = 16

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if IrrepsLayout.parse(self.hidden).lmax < 2:
            raise ValueError("hidden layout needs L_max >= 2")

    @property
    def mults(self) -> dict[int, int]:
        layout = IrrepsLayout.parse(self.hidden)
        return {l: layout.mult(l) for l in layout.degrees()}

    @property
    def lmax(self) -> int:
        return max(self.mults)


@dataclass
class Graph:
    """Disjoint union of molecular graphs with directed edges ``src -> dst``."""

    z: np.ndarray
    pos: np.ndarray
    node_graph: np.ndarray
    n_graphs: int
    src: np.ndarray
    dst: np.ndarray
    vec: np.ndarray = field(init=False)
    dist: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vec = self.pos[self.dst] - self.pos[self.src]
        self.dist = np.linalg.norm(self.vec, axis=1)

    @property
    def n_nodes(self) -> int:
        return len(self.z)


class ConvLayer(Module):
    """One message-passing block.

    Each edge carries ``f_src (x) Y(r_hat)`` through every CG path, each path
    channel scaled by a radial MLP of the edge length. Messages are averaged
    per target node, mixed by an equivariant linear map, gated, normalised and
    added back to the node features.
    """

    def __init__(self, name: str, mults_in: dict[int, int], mults_out: dict[int, int], lmax_sh: int, cfg: BackboneConfig, rng):
        self.paths = cg_paths(sorted(mults_in), range(lmax_sh + 1), sorted(mults_out))
        self.mults_out = dict(mults_out)
        self.lmax_sh = lmax_sh
        offsets, start = [], 0
        for l1, _, _ in self.paths:
            offsets.append((start, start + mults_in[l1]))
            start += mults_in[l1]
        self.offsets = offsets
        self.radial = MLP(f"{name}.radial", [cfg.n_radial, cfg.radial_hidden, start], rng)
        msg_mults = {}
        for l1, _, lo in self.paths:
            msg_mults[lo] = msg_mults.get(lo, 0) + mults_in[l1]
        self.linear = EquiLinear(f"{name}.linear", msg_mults, gate_layout(mults_out), rng)
        self.norm = EquiNorm(f"{name}.norm", mults_out)

    def __call__(self, tape: Tape, x: Features, graph: Graph, sh_edge: dict[int, np.ndarray], radial_edge: Node, inv_deg: np.ndarray) -> Features:
        n = graph.n_nodes
        upd: Features = {}
        if len(graph.src):
            weights = self.radial(tape, radial_edge)  # (E, P)
            gathered = {l: tape.gather(x[l], graph.src) for l in x}
            per_out: dict[int, list[Node]] = {}
            for (l1, l2, lo), (a, b) in zip(self.paths, self.offsets):
                if l1 not in x:
                    continue
                w = weights[:, a:b]
                per_out.setdefault(lo, []).append(tape.cg(gathered[l1], sh_edge[l2], real_cg(l1, l2, lo), w))
            for lo, msgs in per_out.items():
                m = msgs[0] if len(msgs) == 1 else tape.concat(msgs, axis=2)
                agg = tape.scatter_add(m, graph.dst, n)
                upd[lo] = tape.mul(agg, tape.constant(np.broadcast_to(inv_deg[:, None, None], agg.shape)))
        # zero messages for degrees no path reached (e.g. before l>0 features exist)
        for lo, c in self.linear.mults_in.items():
            if lo not in upd:
                upd[lo] = tape.constant(np.zeros((n, 2 * lo + 1, c)))
        h = self.linear(tape, upd)
        h = gate(tape, h, self.mults_out)
        h = self.norm(tape, h)
        out = dict(h)
        for l, f in x.items():
            out[l] = tape.add(f, h[l]) if l in h else f
        return out


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        mults = cfg.mults
        self.embedding = AtomEmbedding("backbone.embed", mults[0], rng)
        self.layers = []
        current = {0: mults[0]}
        for t in range(cfg.layers):
            self.layers.append(ConvLayer(f"backbone.layer{t}", current, mults, cfg.lmax, cfg, rng))
            current = mults

    def edge_inputs(self, graph: Graph):
        if len(graph.src):
            sh = spherical_harmonics(graph.vec, self.cfg.lmax)
            sh_edge = {l: sh[:, l * l : (l + 1) ** 2] for l in range(self.cfg.lmax + 1)}
        else:
            sh_edge = {}
        radial = gaussian_basis(graph.dist, 0.0, self.cfg.cutoff, self.cfg.n_radial)
        deg = np.bincount(graph.dst, minlength=graph.n_nodes).astype(np.float64)
        isolated = int((deg == 0).sum())
        if isolated:
            log.warning("%d isolated node(s) receive no messages", isolated)
        inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        return sh_edge, radial, inv_deg

    def __call__(self, tape: Tape, graph: Graph, injections=()) -> Features:
        """Run all layers; each ``injection(tape, feats) -> feats`` is applied before every layer."""
        sh_edge, radial, inv_deg = self.edge_inputs(graph)
        radial_node = tape.constant(radial)
        emb = self.embedding(tape, graph.z)
        x: Features = {0: tape.reshape(emb, (graph.n_nodes, 1, emb.shape[1]))}
        for layer in self.layers:
            for inject in injections:
                x = inject(tape, x)
            x = layer(tape, x, graph, sh_edge, radial_node, inv_deg)
        return x


# --------------------------------------------------------------------------
# single-tensor conveniences
# --------------------------------------------------------------------------


def equi_linear(x: SteerableTensor, layer: EquiLinear) -> SteerableTensor:
    tape = Tape()
    return tensors_from_features(layer(tape, features_from_tensors(tape, [x])))[0]


def apply_gate(x: SteerableTensor, mults_out: dict[int, int]) -> SteerableTensor:
    tape = Tape()
    return tensors_from_features(gate(tape, features_from_tensors(tape, [x]), mults_out))[0]


def equi_norm(x: SteerableTensor, norm: EquiNorm) -> SteerableTensor:
    tape = Tape()
    return tensors_from_features(norm(tape, features_from_tensors(tape, [x])))[0]
