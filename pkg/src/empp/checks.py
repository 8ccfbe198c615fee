"""Invariant suite run by ``empp check``.

Each check returns a :class:`CheckResult` with the measured error and its
threshold; :func:`run_checks` yields them in a fixed order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .autodiff import Parameter, Tape, check_gradient
from .data import Molecule, gen_synthetic
from .position import EmppModel, ModelConfig, build_batch, empp_single_loss, mask_molecule
from .so3 import (
    cg_paths,
    random_rotation,
    real_cg,
    set_cg_fault,
    spherical_harmonics,
    wigner_d,
)
from .sphere import SphereGrid, from_grid, make_grid

FAULTS = ("cg",)


@dataclass
class CheckResult:
    check: str
    error: float
    threshold: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)

    def to_json(self) -> str:
        return json.dumps({"check": self.check, "error": self.error, "threshold": self.threshold, "pass": self.passed})


def sh_orthonormality(lmax: int = 3, n: int = 100) -> float:
    grid = make_grid(n, n, lmax=lmax)
    y = grid.sh(lmax)
    gram = (y * grid.weights[:, None]).T @ y
    return float(np.abs(gram - np.eye(len(gram))).max())


def steerability(lmax: int = 3, trials: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        rot = random_rotation(rng)
        r = rng.normal(size=3)
        y = spherical_harmonics(r, lmax)
        y_rot = spherical_harmonics(rot @ r, lmax)
        for l in range(lmax + 1):
            s = slice(l * l, (l + 1) ** 2)
            worst = max(worst, float(np.abs(y_rot[s] - wigner_d(l, rot) @ y[s]).max()))
    return worst


def cg_equivariance(lmax: int = 3, trials: int = 20, seed: int = 0) -> float:
    """``(D u) x (D v) = D (u x v)`` on every path with all degrees up to ``lmax``."""
    rng = np.random.default_rng(seed)
    degrees = range(lmax + 1)
    worst = 0.0
    for l1, l2, l3 in cg_paths(degrees, degrees, degrees):
        table = real_cg(l1, l2, l3)
        for _ in range(trials):
            rot = random_rotation(rng)
            u = rng.normal(size=2 * l1 + 1)
            v = rng.normal(size=2 * l2 + 1)
            lhs = np.einsum("ijk,i,j->k", table, wigner_d(l1, rot) @ u, wigner_d(l2, rot) @ v)
            rhs = wigner_d(l3, rot) @ np.einsum("ijk,i,j->k", table, u, v)
            worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def fourier_roundtrip(lmax: int = 3, n: int = 100, trials: int = 5, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    grid = make_grid(n, n, lmax=lmax)
    worst = 0.0
    for _ in range(trials):
        coeffs = rng.normal(size=((lmax + 1) ** 2, 4))
        signal = grid.sh(lmax) @ coeffs
        back = from_grid(signal, grid, lmax).by_degree()
        rec = np.concatenate([back[l].T for l in range(lmax + 1)], axis=0)
        worst = max(worst, float(np.abs(rec - coeffs).max()))
    return worst


def eq9_errors(
    model: EmppModel,
    grid: SphereGrid,
    n_molecules: int = 20,
    n_rotations: int = 5,
    tau: float = 0.1,
    seed: int = 0,
    molecules: list[Molecule] | None = None,
) -> tuple[float, float]:
    """Direction and radius distribution errors under rotation of the input.

    The rotated molecule's direction distribution, evaluated at the
    transported nodes ``R x_s``, is compared against the original
    distribution at ``x_s``; the radius distribution must not move at all.
    """
    rng = np.random.default_rng(seed)
    if molecules is None:
        templates = ["tetrahedral", "planar_hex", "chain"]
        molecules = [gen_synthetic(templates[i % 3], 1, 0.1, seed=seed + i).molecules[0] for i in range(n_molecules)]
    lmax = model.head.lmax
    sh_grid = grid.sh(lmax)
    dir_err = rad_err = 0.0
    for mol in molecules:
        idx = int(rng.integers(len(mol)))
        base = _distributions(model, mask_molecule(mol, idx, model.cfg.cutoff), grid, sh_grid, tau)
        for _ in range(n_rotations):
            rot = random_rotation(rng)
            shift = rng.normal(size=3)
            moved = mol.transformed(rot, shift)
            sh_moved = spherical_harmonics(grid.points @ rot.T, lmax)
            d, r = _distributions(model, mask_molecule(moved, idx, model.cfg.cutoff), grid, sh_moved, tau)
            dir_err = max(dir_err, float(np.abs(d - base[0]).max()))
            rad_err = max(rad_err, float(np.abs(r - base[1]).max()))
    return dir_err, rad_err


def _distributions(model, masked, grid, sh_points, tau):
    tape = Tape()
    batch = build_batch([masked])
    feats = model.encode(tape, batch)
    f = {l: tape.gather(x, batch.nbr_node) for l, x in feats.items()}
    z = model.embedding(tape, batch.masked_z[batch.nbr_graph])
    coeffs = model.head.coefficients(tape, f, z)
    logits = model.head.grid_logits(tape, coeffs, sh_points).value / tau
    d = np.exp(logits - logits.max(axis=1, keepdims=True))
    d /= d.sum(axis=1, keepdims=True)
    r = np.exp(tape.log_softmax(tape.scale(model.head.radius_logits(tape, coeffs), 1.0 / tau)).value)
    return d, r


# --------------------------------------------------------------------------
# gradient checks
# --------------------------------------------------------------------------


def _primitive_cases(rng) -> dict[str, tuple[list[Parameter], Callable[[Tape, list], object]]]:
    def P(name, *shape, positive=False):
        v = rng.normal(size=shape)
        return Parameter(name, np.abs(v) + 0.5 if positive else v)

    w = rng.normal(size=(4, 3))
    table = real_cg(1, 1, 2)
    cases = {
        "add": ([P("a", 4, 3), P("b", 4, 3)], lambda t, n: t.add(n[0], n[1])),
        "sub": ([P("a", 4, 3), P("b", 4, 3)], lambda t, n: t.sub(n[0], n[1])),
        "scale": ([P("a", 4, 3)], lambda t, n: t.scale(n[0], -1.7)),
        "mul": ([P("a", 4, 3), P("b", 4, 3)], lambda t, n: t.mul(n[0], n[1])),
        "div": ([P("a", 4, 3), P("b", 4, 3, positive=True)], lambda t, n: t.div(n[0], n[1])),
        "matmul": ([P("a", 2, 4, 3), P("w", 3, 5)], lambda t, n: t.matmul(n[0], n[1])),
        "lmatmul": ([P("a", 2, 4, 3)], lambda t, n: t.lmatmul(w[:3].T @ w[:3], t.transpose(n[0], (0, 2, 1)))),
        "cg": ([P("u", 5, 3, 2), P("v", 5, 3, 2)], lambda t, n: t.cg(n[0], n[1], table)),
        "cg_weighted": ([P("u", 5, 3, 2), P("v", 5, 3), P("w", 5, 2)], lambda t, n: t.cg(n[0], n[1], table, n[2])),
        "concat": ([P("a", 4, 3), P("b", 4, 2)], lambda t, n: t.concat([n[0], n[1]], axis=1)),
        "slice": ([P("a", 4, 3)], lambda t, n: n[0][1:3, ::2]),
        "reshape": ([P("a", 4, 3)], lambda t, n: t.reshape(n[0], (2, 6))),
        "broadcast_to": ([P("a", 1, 3)], lambda t, n: t.broadcast_to(n[0], (4, 3))),
        "exp": ([P("a", 4, 3)], lambda t, n: t.exp(n[0])),
        "log": ([P("a", 4, 3, positive=True)], lambda t, n: t.log(n[0])),
        "sqrt": ([P("a", 4, 3, positive=True)], lambda t, n: t.sqrt(n[0])),
        "softmax": ([P("a", 4, 3)], lambda t, n: t.softmax(n[0], axis=1)),
        "log_softmax": ([P("a", 4, 3)], lambda t, n: t.log_softmax(n[0], axis=1)),
        "sum": ([P("a", 4, 3)], lambda t, n: t.sum(n[0], axis=0)),
        "mean": ([P("a", 4, 3)], lambda t, n: t.mean(n[0], axis=1, keepdims=True)),
        "gather": ([P("a", 4, 3)], lambda t, n: t.gather(n[0], np.array([0, 2, 2, 3, 1]))),
        "scatter_add": ([P("a", 5, 3)], lambda t, n: t.scatter_add(n[0], np.array([0, 2, 2, 3, 1]), 4)),
        "silu": ([P("a", 4, 3)], lambda t, n: t.silu(n[0])),
        "sigmoid": ([P("a", 4, 3)], lambda t, n: t.sigmoid(n[0])),
        "abs": ([P("a", 4, 3, positive=True)], lambda t, n: t.abs(t.scale(n[0], -1.0))),
        "transpose": ([P("a", 2, 4, 3)], lambda t, n: t.transpose(n[0], (2, 0, 1))),
        "clip_min": ([P("a", 4, 3, positive=True)], lambda t, n: t.clip_min(n[0], 0.1)),
    }
    return cases


def primitive_gradients(seed: int = 0) -> dict[str, float]:
    """Worst relative error per primitive, each loss a random projection of its output."""
    rng = np.random.default_rng(seed)
    errors = {}
    for name, (params, build) in _primitive_cases(rng).items():
        probe = {}

        def f(tape, params=params, build=build, probe=probe):
            out = build(tape, [tape.param(p) for p in params])
            if "w" not in probe:
                probe["w"] = rng.normal(size=out.shape)
            return tape.sum(tape.mul(out, tape.constant(probe["w"])))

        errors[name] = check_gradient(f, params, h=1e-3, floor=1e-6, ridders=6).max_rel_error
    return errors


def small_model_config() -> ModelConfig:
    return ModelConfig(layers=2, hidden="4x0+2x1+2x2", n_radial=4, radial_hidden=4,
                       head_hidden=4, head_out=4, grid_mlp_hidden=4)


def loss_gradient(seed: int = 2, mask_index: int = 3, max_per_param: int | None = None, h: float = 1e-3) -> tuple[float, float]:
    """Gradient check of the single-mask loss on a 5-atom toy molecule.

    Returns the worst relative error and the smallest distance (in nats)
    between any log-probability and the ``log 1e-12`` floor; within a step of
    that floor the loss has a kink and finite differences are meaningless.
    """
    mol = gen_synthetic("tetrahedral", 1, 0.05, seed=0).molecules[0]
    model = EmppModel(small_model_config(), seed=seed)
    grid = make_grid(6, 6, lmax=2)
    masked = mask_molecule(mol, mask_index)
    out = model.predict(Tape(), build_batch([masked]), grid)
    logs = np.concatenate([out.log_radius.value.ravel(), out.log_direction.value.ravel()])
    margin = float(np.abs(logs - np.log(1e-12)).min())
    f = lambda tape: empp_single_loss(tape, model, masked, grid).total
    res = check_gradient(f, model.parameters(), h=h, floor=1e-6, max_per_param=max_per_param, ridders=6)
    return res.max_rel_error, margin


# --------------------------------------------------------------------------
# suite
# --------------------------------------------------------------------------


def run_checks(model: EmppModel | None = None, grid: SphereGrid | None = None, fault: str | None = None,
               quick_gradients: bool = True) -> Iterator[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    if fault == "cg":
        set_cg_fault(1e-3)
    try:
        yield from _suite(model, grid, quick_gradients)
    finally:
        set_cg_fault(None)


def _timed(name: str, fn: Callable[[], float], threshold: float) -> CheckResult:
    t = time.perf_counter()
    err = fn()
    return CheckResult(name, float(err), threshold, time.perf_counter() - t)


def _suite(model, grid, quick_gradients) -> Iterator[CheckResult]:
    yield _timed("sh_orthonormality", sh_orthonormality, 1e-9)
    yield _timed("steerability", steerability, 1e-9)
    yield _timed("cg_equivariance", cg_equivariance, 1e-9)
    yield _timed("fourier_roundtrip", fourier_roundtrip, 1e-9)
    model = model or EmppModel(ModelConfig(), seed=0)
    grid = grid or make_grid(100, 100, lmax=model.head.lmax)
    t = time.perf_counter()
    d, r = eq9_errors(model, grid)
    dt = time.perf_counter() - t
    yield CheckResult("eq9_direction_equivariance", d, 1e-6, dt)
    yield CheckResult("eq9_radius_invariance", r, 1e-12, dt)
    t = time.perf_counter()
    prim = primitive_gradients()
    yield CheckResult("primitive_gradients", max(prim.values()), 1e-7, time.perf_counter() - t)
    t = time.perf_counter()
    err, _ = loss_gradient(max_per_param=4 if quick_gradients else None)
    yield CheckResult("loss_gradient", err, 1e-5, time.perf_counter() - t)
