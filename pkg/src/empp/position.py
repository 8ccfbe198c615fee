"""Masked position prediction: masking, the prediction head, labels and KL losses.

One atom's position is removed from the graph while its atomic number is
injected into every remaining node. Each neighbour ``k`` of the masked atom
(atoms within the cutoff of its true position) predicts a radius
distribution over 128 bins and a direction distribution over sphere-grid
nodes; the position estimate from ``k`` is ``p_k + r * r_hat``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .autodiff import Node, Parameter, Tape
from .data import Molecule, neighbor_list, neighbors_of_point
from .layers import (
    AtomEmbedding,
    Backbone,
    BackboneConfig,
    EquiLinear,
    Features,
    Graph,
    MLP,
    Module,
    gate,
    gate_layout,
    gaussian_basis,
)
from .so3 import real_cg, spherical_harmonics
from .sphere import SphereGrid, check_nyquist

log = logging.getLogger(__name__)

N_BINS = 128
R_MIN = 0.9
R_MAX = 5.0
SIGMA = 0.5
TAU = 0.1
CUTOFF = 5.0
KL_FLOOR = 1e-12
N_PROPERTY_BASIS = 32


class MaskingError(ValueError):
    """The masked atom has no neighbour within the cutoff, or too few atoms qualify."""


# --------------------------------------------------------------------------
# radial bins and labels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialBins:
    n: int = N_BINS
    r_min: float = R_MIN
    r_max: float = R_MAX

    @property
    def width(self) -> float:
        return (self.r_max - self.r_min) / self.n

    @property
    def centers(self) -> np.ndarray:
        return self.r_min + (np.arange(self.n) + 0.5) * self.width

    def index(self, r) -> np.ndarray:
        """Bin holding distance ``r`` (clipped to the range)."""
        idx = np.floor((np.asarray(r) - self.r_min) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)


def radius_label(distance: float, sigma: float = SIGMA, bins: RadialBins = RadialBins()) -> np.ndarray:
    """Gaussian density at the bin centres, renormalised to sum to one."""
    if not distance > 0:
        raise ValueError("distance must be positive")
    if distance < bins.r_min - 3 * sigma or distance > bins.r_max + 3 * sigma:
        log.warning("distance %.3f lies more than 3 sigma outside [%g, %g]; label mass clipped",
                    distance, bins.r_min, bins.r_max)
    logq = -0.5 * ((bins.centers - distance) / sigma) ** 2
    q = np.exp(logq - logq.max())
    return q / q.sum()


def direction_label(direction, grid: SphereGrid, lmax: int = 2, quadrature_weighted: bool = False) -> np.ndarray:
    """Soft direction label ``w(x) = exp(sum_lm Y_lm(r_hat) Y_lm(x))`` on the grid nodes.

    By default the label is normalised over nodes, the same measure the
    predicted softmax uses. ``quadrature_weighted=True`` multiplies each node by
    its quadrature weight before normalising (probability mass per cell).
    """
    sh_dir = spherical_harmonics(np.asarray(direction, dtype=np.float64), lmax)
    expo = grid.sh(lmax) @ sh_dir
    w = np.exp(expo - expo.max())
    if quadrature_weighted:
        w = w * grid.weights
    return w / w.sum()


def direction_labels(directions: np.ndarray, grid: SphereGrid, lmax: int = 2) -> np.ndarray:
    """Row-wise :func:`direction_label` for ``(K, 3)`` directions."""
    sh_dir = spherical_harmonics(directions, lmax)  # (K, nlm)
    expo = sh_dir @ grid.sh(lmax).T  # (K, S)
    w = np.exp(expo - expo.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def kl_div(q, p, floor: float = KL_FLOOR) -> float:
    """``sum q log(q / p)`` with ``0 log 0 = 0`` and ``p`` floored before the log."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"distributions differ in shape: {q.shape} vs {p.shape}")
    pos = q > 0
    return float(np.sum(q[pos] * (np.log(q[pos]) - np.log(np.maximum(p[pos], floor)))))


# --------------------------------------------------------------------------
# masking
# --------------------------------------------------------------------------


@dataclass
class MaskedMolecule:
    """A molecule with atom ``index`` removed from the graph.

    ``neighbors`` index the original molecule; they are the atoms within the
    cutoff of the true masked position.
    """

    mol: Molecule
    index: int
    neighbors: np.ndarray
    cutoff: float = CUTOFF

    @property
    def masked_z(self) -> int:
        return int(self.mol.z[self.index])

    @property
    def target(self) -> np.ndarray:
        return self.mol.pos[self.index]

    @property
    def visible(self) -> np.ndarray:
        return np.delete(np.arange(len(self.mol)), self.index)

    def visible_index(self, original: np.ndarray) -> np.ndarray:
        """Map original atom indices to indices among the visible atoms."""
        original = np.asarray(original)
        return original - (original > self.index)

    def offsets(self) -> np.ndarray:
        """``r_ik = p_i - p_k`` for every neighbour ``k``."""
        return self.target - self.mol.pos[self.neighbors]


def mask_molecule(mol: Molecule, index: int, cutoff: float = CUTOFF) -> MaskedMolecule:
    if not 0 <= index < len(mol):
        raise IndexError(f"mask index {index} out of range for {len(mol)} atoms")
    nbrs = neighbors_of_point(mol.pos, mol.pos[index], cutoff, exclude=index)
    if len(nbrs) == 0:
        raise MaskingError(f"atom {index} has no neighbour within {cutoff} angstrom")
    return MaskedMolecule(mol, int(index), nbrs, cutoff)


def eligible_atoms(mol: Molecule, cutoff: float = CUTOFF) -> np.ndarray:
    src, _, _, _ = neighbor_list(mol.pos, cutoff)
    return np.unique(src)


def sample_mask_indices(mol: Molecule, n: int, rng: np.random.Generator, cutoff: float = CUTOFF) -> np.ndarray:
    """``n`` distinct atoms with at least one neighbour, uniformly without replacement."""
    candidates = eligible_atoms(mol, cutoff)
    if not 1 <= n <= len(candidates):
        raise MaskingError(f"cannot mask {n} atoms: {len(candidates)} of {len(mol)} have neighbours")
    return rng.choice(candidates, size=n, replace=False)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass
class ModelConfig:
    layers: int = 3
    hidden: str = "64x0+32x1+16x2+8x3"
    cutoff: float = CUTOFF
    n_radial: int = 16
    radial_hidden: int = 16
    head_lmax: int = 2
    head_hidden: int = 64
    head_out: int = 32
    grid_mlp_hidden: int = 16
    n_bins: int = N_BINS
    r_min: float = R_MIN
    r_max: float = R_MAX
    # auxiliary-task encoding: "none", "energy" or "force"
    encode_property: str = "none"
    label_min: float = 0.0
    label_max: float = 1.0
    energy_mean: float = 0.0
    energy_std: float = 1.0

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.layers, self.hidden, self.cutoff, self.n_radial, self.radial_hidden)

    @property
    def bins(self) -> RadialBins:
        return RadialBins(self.n_bins, self.r_min, self.r_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                continue
            default = getattr(cls, k)
            kwargs[k] = type(default)(v)
        return cls(**kwargs)


@dataclass
class MaskedBatch:
    """Disjoint union of masked molecules plus the per-neighbour bookkeeping."""

    masked: list[MaskedMolecule]
    graph: Graph
    masked_z: np.ndarray  # (G,)
    nbr_node: np.ndarray  # (K,) node index in the union graph
    nbr_graph: np.ndarray  # (K,) which masked molecule
    nbr_pos: np.ndarray  # (K, 3)
    offsets: np.ndarray  # (K, 3) r_ik
    energy: np.ndarray | None = None  # (G,)
    force: np.ndarray | None = None  # (G, 3) label on the masked atom

    @property
    def n_graphs(self) -> int:
        return len(self.masked)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.nbr_graph, minlength=self.n_graphs)


def build_batch(masked: Sequence[MaskedMolecule]) -> MaskedBatch:
    z, pos, node_graph, src, dst = [], [], [], [], []
    nbr_node, nbr_graph, nbr_pos, offsets = [], [], [], []
    energy, force = [], []
    start = 0
    for g, mm in enumerate(masked):
        vis = mm.visible
        p = mm.mol.pos[vis]
        s, d, _, _ = neighbor_list(p, mm.cutoff)
        z.append(mm.mol.z[vis])
        pos.append(p)
        node_graph.append(np.full(len(vis), g))
        src.append(s + start)
        dst.append(d + start)
        nbr_node.append(mm.visible_index(mm.neighbors) + start)
        nbr_graph.append(np.full(len(mm.neighbors), g))
        nbr_pos.append(mm.mol.pos[mm.neighbors])
        offsets.append(mm.offsets())
        energy.append(np.nan if mm.mol.energy is None else mm.mol.energy)
        force.append(np.zeros(3) if mm.mol.forces is None else mm.mol.forces[mm.index])
        start += len(vis)
    graph = Graph(
        np.concatenate(z),
        np.concatenate(pos),
        np.concatenate(node_graph),
        len(masked),
        np.concatenate(src).astype(np.int64),
        np.concatenate(dst).astype(np.int64),
    )
    return MaskedBatch(
        list(masked),
        graph,
        np.array([mm.masked_z for mm in masked]),
        np.concatenate(nbr_node),
        np.concatenate(nbr_graph),
        np.concatenate(nbr_pos),
        np.concatenate(offsets),
        np.array(energy),
        np.array(force),
    )


def molecule_graph(mols: Sequence[Molecule], cutoff: float) -> Graph:
    z, pos, node_graph, src, dst = [], [], [], [], []
    start = 0
    for g, mol in enumerate(mols):
        s, d, _, _ = neighbor_list(mol.pos, cutoff)
        z.append(mol.z)
        pos.append(mol.pos)
        node_graph.append(np.full(len(mol), g))
        src.append(s + start)
        dst.append(d + start)
        start += len(mol)
    return Graph(
        np.concatenate(z), np.concatenate(pos), np.concatenate(node_graph), len(mols),
        np.concatenate(src).astype(np.int64), np.concatenate(dst).astype(np.int64),
    )


@dataclass
class HeadOutput:
    log_radius: Node  # (K, n_bins)
    direction_logits: Node  # (K, S), already divided by tau
    coefficients: Node  # (K, (L+1)^2, C) grid-MLP input coefficients
    log_direction: Node  # (K, S)


class PositionHead(Module):
    """Equivariant two-layer MLP, atom-type coupling, radius and direction readouts."""

    def __init__(self, cfg: ModelConfig, embed_dim: int, rng):
        mults_in = {l: c for l, c in cfg.backbone.mults.items() if l <= cfg.head_lmax}
        self.lmax = cfg.head_lmax
        self.inter = {l: cfg.head_hidden for l in range(cfg.head_lmax + 1)}
        self.outm = {l: cfg.head_out for l in range(cfg.head_lmax + 1)}
        self.lin1 = EquiLinear("head.lin1", mults_in, gate_layout(self.inter), rng)
        # per-degree channel weights derived from the masked atom's embedding
        self.z_proj = MLP("head.zproj", [embed_dim, cfg.head_hidden * (cfg.head_lmax + 1)], rng)
        self.lin2 = EquiLinear("head.lin2", self.inter, self.outm, rng)
        self.radius = MLP("head.radius", [cfg.head_out, cfg.n_bins], rng)
        # shared per-point MLP on the sphere: Linear(C, h) - SiLU - Linear(h, 1).
        # The final bias is dropped: a constant logit shift cancels in the softmax.
        h = cfg.grid_mlp_hidden
        self.grid_w1 = Parameter("head.grid.w0", rng.normal(scale=1 / math.sqrt(cfg.head_out), size=(cfg.head_out, h)))
        self.grid_b1 = Parameter("head.grid.b0", np.zeros(h))
        self.grid_w2 = Parameter("head.grid.w1", rng.normal(scale=1 / math.sqrt(h), size=(h, 1)))

    def coefficients(self, tape: Tape, f: Features, z_embed: Node) -> Features:
        """Steerable head features of shape ``(K, 2l+1, head_out)`` per degree."""
        x = {l: f[l] for l in range(self.lmax + 1)}
        x = gate(tape, self.lin1(tape, x), self.inter)
        k = z_embed.shape[0]
        c = self.inter[0]
        e = self.z_proj(tape, z_embed)  # (K, c * (lmax+1))
        out = {}
        for l in range(self.lmax + 1):
            el = tape.reshape(e[:, l * c : (l + 1) * c], (k, 1, c))
            out[l] = tape.cg(x[l], el, real_cg(l, 0, l))
        return self.lin2(tape, out)

    def radius_logits(self, tape: Tape, coeffs: Features) -> Node:
        k = coeffs[0].shape[0]
        return self.radius(tape, tape.reshape(coeffs[0], (k, coeffs[0].shape[2])))

    def grid_logits(self, tape: Tape, coeffs: Features, sh_points: np.ndarray) -> Node:
        """Per-point MLP of the synthesised signal at ``sh_points`` (P, (L+1)^2) -> (K, P)."""
        stacked = tape.concat([coeffs[l] for l in range(self.lmax + 1)], axis=1)  # (K, nlm, C)
        k, nlm, _ = stacked.shape
        # the first linear layer commutes with synthesis, so it runs on coefficients
        h = tape.matmul(stacked, tape.param(self.grid_w1))  # (K, nlm, h)
        # a bias on the sphere is a constant function: put it in the Y_00 coefficient
        y00 = 0.5 / math.sqrt(math.pi)
        b = tape.reshape(tape.scale(tape.param(self.grid_b1), 1.0 / y00), (1, h.shape[2]))
        b = tape.concat([b, tape.constant(np.zeros((nlm - 1, h.shape[2])))], axis=0)
        h = tape.add(h, tape.broadcast_to(b, h.shape))
        g = tape.silu(tape.lmatmul(sh_points, h))  # (K, P, h)
        out = tape.matmul(g, tape.param(self.grid_w2))  # (K, P, 1)
        return tape.reshape(out, (k, sh_points.shape[0]))

    def __call__(self, tape: Tape, f: Features, z_embed: Node, grid: SphereGrid, tau: float) -> HeadOutput:
        check_nyquist(grid.n_theta, grid.n_phi, self.lmax)
        coeffs = self.coefficients(tape, f, z_embed)
        rad = tape.log_softmax(tape.scale(self.radius_logits(tape, coeffs), 1.0 / tau))
        logits = tape.scale(self.grid_logits(tape, coeffs, grid.sh(self.lmax)), 1.0 / tau)
        stacked = tape.concat([coeffs[l] for l in range(self.lmax + 1)], axis=1)
        return HeadOutput(rad, logits, stacked, tape.log_softmax(logits))


class EmppModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        bb = cfg.backbone
        self.backbone = Backbone(bb, rng)
        c0 = bb.mults[0]
        # e_i = MLP(EMBED(z_i)) shares the backbone's embedding table
        self.mask_mlp = MLP("mask.mlp", [c0, c0, c0], rng)
        self.head = PositionHead(cfg, c0, rng)
        self.prop_scalar = MLP("prop.energy", [N_PROPERTY_BASIS, c0], rng)
        self.prop_vector = EquiLinear("prop.force", {0: 1, 1: 1}, {0: c0, 1: bb.mults[1]}, rng, bias=False)
        self.energy_head = MLP("energy.mlp", [c0, c0, 1], rng)

    @property
    def embedding(self) -> AtomEmbedding:
        return self.backbone.embedding

    # -- injections applied before every backbone layer ---------------------

    def masked_attribute_injection(self, masked_z: np.ndarray, node_graph: np.ndarray) -> Callable:
        def inject(tape: Tape, x: Features) -> Features:
            e = self.mask_mlp(tape, self.embedding(tape, masked_z))  # (G, c0)
            e = tape.gather(e, node_graph)
            x = dict(x)
            x[0] = tape.add(x[0], tape.reshape(e, x[0].shape))
            return x

        return inject

    def property_injection(self, batch: MaskedBatch) -> Callable | None:
        kind = self.cfg.encode_property
        if kind == "none":
            return None
        node_graph = batch.graph.node_graph
        if kind == "energy":
            if np.any(np.isnan(batch.energy)):
                raise ValueError("energy encoding requested but a molecule has no energy label")
            basis = gaussian_basis(batch.energy, self.cfg.label_min, self.cfg.label_max, N_PROPERTY_BASIS)

            def inject(tape: Tape, x: Features) -> Features:
                v = tape.gather(self.prop_scalar(tape, tape.constant(basis)), node_graph)
                x = dict(x)
                x[0] = tape.add(x[0], tape.reshape(v, x[0].shape))
                return x

            return inject
        if kind == "force":
            f = batch.force
            mag = np.linalg.norm(f, axis=1)
            sh = np.zeros((len(f), 4))
            ok = mag > 0
            if ok.any():
                sh[ok] = spherical_harmonics(f[ok], 1) * mag[ok, None]
            scalar = sh[:, None, :1][..., None].reshape(len(f), 1, 1)
            vector = sh[:, 1:4].reshape(len(f), 3, 1)

            def inject(tape: Tape, x: Features) -> Features:
                enc = self.prop_vector(tape, {0: tape.constant(scalar), 1: tape.constant(vector)})
                x = dict(x)
                for l in (0, 1):
                    if l in x:
                        x[l] = tape.add(x[l], tape.gather(enc[l], node_graph))
                    else:
                        x[l] = tape.gather(enc[l], node_graph)
                return x

            return inject
        raise ValueError(f"unknown property encoding {kind!r}")

    # -- forward passes -------------------------------------------------------

    def encode(self, tape: Tape, batch: MaskedBatch) -> Features:
        injections = [self.masked_attribute_injection(batch.masked_z, batch.graph.node_graph)]
        prop = self.property_injection(batch)
        if prop is not None:
            injections.append(prop)
        return self.backbone(tape, batch.graph, injections)

    def predict(self, tape: Tape, batch: MaskedBatch, grid: SphereGrid, tau: float = TAU) -> HeadOutput:
        feats = self.encode(tape, batch)
        f = {l: tape.gather(x, batch.nbr_node) for l, x in feats.items()}
        z_embed = self.embedding(tape, batch.masked_z[batch.nbr_graph])
        return self.head(tape, f, z_embed, grid, tau)

    def predict_energy(self, tape: Tape, mols: Sequence[Molecule]) -> Node:
        graph = molecule_graph(mols, self.cfg.cutoff)
        feats = self.backbone(tape, graph)
        s = feats[0]
        per_atom = self.energy_head(tape, tape.reshape(s, (graph.n_nodes, s.shape[2])))
        total = tape.reshape(tape.scatter_add(per_atom, graph.node_graph, graph.n_graphs), (graph.n_graphs,))
        return tape.add(tape.scale(total, self.cfg.energy_std), tape.constant(np.full(graph.n_graphs, self.cfg.energy_mean)))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


@dataclass
class EmppLoss:
    radius: Node  # (G,) per masked molecule
    direction: Node  # (G,)
    total: Node  # scalar: mean over masked molecules of radius + direction

    @property
    def per_mask(self) -> np.ndarray:
        return self.radius.value + self.direction.value

    def as_floats(self) -> dict[str, float]:
        g = self.radius.shape[0]
        return {
            "radius": float(self.radius.value.sum() / g),
            "direction": float(self.direction.value.sum() / g),
            "total": float(self.total.value),
        }


def batch_labels(batch: MaskedBatch, grid: SphereGrid, sigma: float, bins: RadialBins, label_lmax: int) -> tuple[np.ndarray, np.ndarray]:
    dist = np.linalg.norm(batch.offsets, axis=1)
    q_rad = np.stack([radius_label(d, sigma, bins) for d in dist])
    q_dir = direction_labels(batch.offsets, grid, label_lmax)
    return q_rad, q_dir


def kl_rows(tape: Tape, q: np.ndarray, logp: Node, floor: float = KL_FLOOR) -> Node:
    """Row-wise ``sum q (log q - max(log p, log floor))`` -> (K,)."""
    qlogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum(axis=1)
    cross = tape.sum(tape.mul(tape.constant(q), tape.clip_min(logp, math.log(floor))), axis=1)
    return tape.sub(tape.constant(qlogq), cross)


def per_mask_mean(tape: Tape, values: Node, batch: MaskedBatch) -> Node:
    """Average per-neighbour values over each masked molecule's neighbour set."""
    counts = batch.counts.astype(np.float64)
    summed = tape.reshape(tape.scatter_add(tape.reshape(values, (len(batch.nbr_graph), 1)), batch.nbr_graph, batch.n_graphs), (batch.n_graphs,))
    return tape.div(summed, tape.constant(counts))


def empp_losses(
    tape: Tape,
    model: EmppModel,
    masked: Sequence[MaskedMolecule],
    grid: SphereGrid,
    tau: float = TAU,
    sigma: float = SIGMA,
    label_lmax: int | None = None,
) -> EmppLoss:
    """Single-mask losses for a batch of masked molecules; ``total`` is their mean."""
    batch = build_batch(masked)
    out = model.predict(tape, batch, grid, tau)
    q_rad, q_dir = batch_labels(batch, grid, sigma, model.cfg.bins, label_lmax or model.cfg.head_lmax)
    rad = per_mask_mean(tape, kl_rows(tape, q_rad, out.log_radius), batch)
    dirn = per_mask_mean(tape, kl_rows(tape, q_dir, out.log_direction), batch)
    total = tape.mean(tape.add(rad, dirn))
    return EmppLoss(rad, dirn, total)


def empp_single_loss(tape: Tape, model: EmppModel, masked: MaskedMolecule, grid: SphereGrid, tau: float = TAU, sigma: float = SIGMA) -> EmppLoss:
    if len(masked.neighbors) == 0:
        raise MaskingError("masked atom has an empty neighbour set")
    return empp_losses(tape, model, [masked], grid, tau, sigma)


def empp_multi_loss(
    tape: Tape,
    model: EmppModel,
    mol: Molecule,
    indices: Sequence[int],
    grid: SphereGrid,
    tau: float = TAU,
    sigma: float = SIGMA,
) -> EmppLoss:
    """Mean of single-mask losses, one copy of ``mol`` per masked index.

    Each copy hides exactly one atom; this is not simultaneous masking.
    """
    masked = [mask_molecule(mol, int(i), model.cfg.cutoff) for i in indices]
    return empp_losses(tape, model, masked, grid, tau, sigma)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


@dataclass
class Prediction:
    masked: MaskedMolecule
    radius: np.ndarray  # (K, n_bins)
    direction: np.ndarray  # (K, S)
    coefficients: np.ndarray  # (K, nlm, C)
    bins: RadialBins
    grid: SphereGrid

    @property
    def neighbor_positions(self) -> np.ndarray:
        return self.masked.mol.pos[self.masked.neighbors]


def predict(model: EmppModel, masked: Sequence[MaskedMolecule] | MaskedMolecule, grid: SphereGrid, tau: float = TAU) -> list[Prediction]:
    if isinstance(masked, MaskedMolecule):
        masked = [masked]
    batch = build_batch(masked)
    out = model.predict(Tape(), batch, grid, tau)
    rad = np.exp(out.log_radius.value)
    dirn = np.exp(out.log_direction.value)
    preds = []
    for g, mm in enumerate(masked):
        sel = batch.nbr_graph == g
        preds.append(Prediction(mm, rad[sel], dirn[sel], out.coefficients.value[sel], model.cfg.bins, grid))
    return preds


def predicted_position(
    radius: np.ndarray,
    direction: np.ndarray,
    neighbor_pos: np.ndarray,
    grid: SphereGrid,
    bins: RadialBins = RadialBins(),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-neighbour ``p_k + r_argmax * r_hat_argmax`` and their coordinate-wise mean."""
    radius = np.atleast_2d(radius)
    direction = np.atleast_2d(direction)
    neighbor_pos = np.atleast_2d(neighbor_pos)
    r = bins.centers[np.argmax(radius, axis=1)]
    d = grid.points[np.argmax(direction, axis=1)]
    each = neighbor_pos + r[:, None] * d
    return each.mean(axis=0), each


def write_radius_csv(path, probs: np.ndarray, bins: RadialBins = RadialBins()) -> None:
    """``bin_center,probability`` rows with 17 significant digits."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (bins.n,):
        raise ValueError(f"expected {bins.n} probabilities, got shape {probs.shape}")
    with open(path, "w") as fh:
        fh.write("bin_center,probability\n")
        for c, p in zip(bins.centers, probs):
            fh.write(f"{c:.17g},{p:.17g}\n")


def read_radius_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
