"""Real spherical harmonics, Wigner-D matrices and real Clebsch-Gordan couplings.

Convention
----------
Components of a degree-``l`` block are ordered ``m = -l, ..., l``. The real
harmonics carry no Condon-Shortley phase, so the ``l = 1`` block is
proportional to ``(y, z, x)``::

    Y_l^m  = sqrt(2) N_lm P_l^m(cos t) cos(m p)     m > 0
    Y_l^0  =         N_l0 P_l^0(cos t)
    Y_l^-m = sqrt(2) N_lm P_l^m(cos t) sin(m p)     m > 0

Golden values in this package (Wigner-D entries, CG signs, the cross-product
constant) are only meaningful inside this convention; other libraries order
or sign their real harmonics differently.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

LMAX_SUPPORTED = 6

__all__ = [
    "LMAX_SUPPORTED",
    "IrrepsLayout",
    "SteerableTensor",
    "LayoutError",
    "eval_sh",
    "spherical_harmonics",
    "sh_vector",
    "wigner_d",
    "real_cg",
    "complex_cg",
    "real_to_complex_basis",
    "tensor_product",
    "rotate_steerable",
    "random_rotation",
    "angles_to_vector",
    "vector_to_angles",
]


class LayoutError(ValueError):
    """Raised when irreps layouts are incompatible with the requested operation."""


# --------------------------------------------------------------------------
# layouts and steerable tensors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IrrepsLayout:
    """Ordered ``(multiplicity, degree)`` blocks, e.g. ``[(64, 0), (32, 1)]``."""

    blocks: tuple[tuple[int, int], ...]

    def __init__(self, blocks: Iterable[tuple[int, int]]):
        blocks = tuple((int(c), int(l)) for c, l in blocks)
        for c, l in blocks:
            if c < 0 or l < 0:
                raise LayoutError(f"invalid block ({c}, {l})")
        degrees = [l for _, l in blocks]
        if degrees != sorted(degrees):
            raise LayoutError(f"degrees must be nondecreasing, got {degrees}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def parse(cls, text: str) -> "IrrepsLayout":
        """Parse ``"64x0+32x1+16x2"``."""
        blocks = []
        for part in text.replace(" ", "").split("+"):
            if not part:
                continue
            c, l = part.split("x")
            blocks.append((int(c), int(l.rstrip("e"))))
        return cls(blocks)

    @classmethod
    def spherical(cls, lmax: int, mult: int = 1) -> "IrrepsLayout":
        return cls([(mult, l) for l in range(lmax + 1)])

    @property
    def dim(self) -> int:
        return sum(c * (2 * l + 1) for c, l in self.blocks)

    @property
    def lmax(self) -> int:
        return max((l for _, l in self.blocks), default=0)

    def mult(self, l: int) -> int:
        """Total multiplicity of degree ``l`` (0 when absent)."""
        return sum(c for c, ll in self.blocks if ll == l)

    def degrees(self) -> list[int]:
        return sorted({l for c, l in self.blocks if c > 0})

    def slices(self) -> list[tuple[int, int, slice]]:
        """``(mult, l, slice)`` of every block in the flat value array."""
        out, start = [], 0
        for c, l in self.blocks:
            size = c * (2 * l + 1)
            out.append((c, l, slice(start, start + size)))
            start += size
        return out

    def __str__(self) -> str:
        return "+".join(f"{c}x{l}" for c, l in self.blocks)


@dataclass
class SteerableTensor:
    layout: IrrepsLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.layout.dim:
            raise LayoutError(
                f"layout {self.layout} has dimension {self.layout.dim}, "
                f"got {self.values.size} values"
            )

    def block(self, index: int) -> np.ndarray:
        """Block ``index`` as a ``(mult, 2l+1)`` array (a view)."""
        c, l, sl = self.layout.slices()[index]
        return self.values[sl].reshape(c, 2 * l + 1)

    def by_degree(self) -> dict[int, np.ndarray]:
        """Concatenate all blocks of equal degree into ``{l: (mult, 2l+1)}``."""
        out: dict[int, list[np.ndarray]] = {}
        for i, (c, l, _) in enumerate(self.layout.slices()):
            out.setdefault(l, []).append(self.block(i))
        return {l: np.concatenate(v, axis=0) for l, v in out.items()}

    @classmethod
    def from_degrees(cls, blocks: dict[int, np.ndarray]) -> "SteerableTensor":
        layout = IrrepsLayout([(b.shape[0], l) for l, b in sorted(blocks.items())])
        values = np.concatenate([blocks[l].reshape(-1) for l in sorted(blocks)]) if blocks else np.zeros(0)
        return cls(layout, values)

    @classmethod
    def zeros(cls, layout: IrrepsLayout) -> "SteerableTensor":
        return cls(layout, np.zeros(layout.dim))


# --------------------------------------------------------------------------
# spherical harmonics
# --------------------------------------------------------------------------


def angles_to_vector(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def vector_to_angles(vec) -> tuple[np.ndarray, np.ndarray]:
    vec = np.asarray(vec, dtype=np.float64)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    r = np.linalg.norm(vec, axis=-1)
    theta = np.arccos(np.clip(z / r, -1.0, 1.0))
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    return theta, phi


def _normalize(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("direction undefined for a zero vector")
    return vectors / norm


@lru_cache(maxsize=None)
def _norm_const(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def spherical_harmonics(vectors, lmax: int, normalize: bool = True) -> np.ndarray:
    """Real spherical harmonics of degrees ``0..lmax`` for an array of directions.

    Returns shape ``(..., (lmax+1)**2)`` with blocks ordered by degree and
    ``m = -l..l`` inside each block. Evaluated as polynomials in ``x, y, z``,
    so there is no singularity at the poles.
    """
    if not 0 <= lmax <= LMAX_SUPPORTED:
        raise ValueError(f"lmax must lie in [0, {LMAX_SUPPORTED}], got {lmax}")
    v = _normalize(vectors) if normalize else np.asarray(vectors, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out = np.empty(v.shape[:-1] + ((lmax + 1) ** 2,))

    # (x + iy)^m = sin^m(t) e^{imp}
    cos_m = [np.ones_like(x)]
    sin_m = [np.zeros_like(x)]
    for _ in range(lmax):
        c, s = cos_m[-1], sin_m[-1]
        cos_m.append(c * x - s * y)
        sin_m.append(c * y + s * x)

    # q[l][m] = P_l^m(z) / sin^m(t), without the Condon-Shortley phase
    for m in range(lmax + 1):
        q_prev = np.full_like(z, float(_double_factorial(2 * m - 1)))
        q_curr = None
        for l in range(m, lmax + 1):
            if l == m:
                q = q_prev
            elif l == m + 1:
                q_curr = z * (2 * m + 1) * q_prev
                q = q_curr
            else:
                q_next = ((2 * l - 1) * z * q_curr - (l + m - 1) * q_prev) / (l - m)
                q_prev, q_curr = q_curr, q_next
                q = q_next
            n = _norm_const(l, m)
            base = l * l + l
            if m == 0:
                out[..., base] = n * q
            else:
                out[..., base + m] = math.sqrt(2) * n * q * cos_m[m]
                out[..., base - m] = math.sqrt(2) * n * q * sin_m[m]
    return out


def _double_factorial(n: int) -> int:
    return 1 if n <= 0 else n * _double_factorial(n - 2)


def eval_sh(l: int, m: int, direction) -> float:
    """Value of the real harmonic ``Y_l^m`` at a unit 3-vector."""
    if not 0 <= l <= LMAX_SUPPORTED or not -l <= m <= l:
        raise ValueError(f"invalid (l, m) = ({l}, {m})")
    return float(spherical_harmonics(np.asarray(direction, dtype=np.float64), l)[l * l + l + m])


def sh_vector(direction, lmax: int) -> SteerableTensor:
    return SteerableTensor(IrrepsLayout.spherical(lmax), spherical_harmonics(direction, lmax))


# --------------------------------------------------------------------------
# rotations and Wigner-D
# --------------------------------------------------------------------------


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _check_rotation(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(rot) - 1) > 1e-10:
        raise ValueError("matrix is not a proper rotation")
    return rot


def _sample_directions(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return _normalize(rng.normal(size=(n, 3)))


def wigner_d(l: int, rot) -> np.ndarray:
    """Real Wigner-D matrix with ``Y^l(R r) = D^l(R) Y^l(r)``.

    Solved by least squares from harmonics sampled at a fixed set of
    directions; a badly conditioned sample set is replaced by a fresh one.
    """
    rot = _check_rotation(rot)
    if l == 0:
        return np.ones((1, 1))
    sl = slice(l * l, (l + 1) ** 2)
    n = 2 * (2 * l + 1)
    for attempt in range(8):
        dirs = _sample_directions(n, seed=attempt)
        a = spherical_harmonics(dirs, l)[:, sl]  # (n, 2l+1)
        if np.linalg.cond(a) > 1e6:
            continue
        b = spherical_harmonics(dirs @ rot.T, l)[:, sl]
        # D a_j = b_j for all j  <=>  a D^T = b
        dt, *_ = np.linalg.lstsq(a, b, rcond=None)
        if np.abs(a @ dt - b).max() < 1e-10:
            return dt.T
    raise RuntimeError(f"could not construct Wigner-D for l={l}")


def rotate_steerable(x: SteerableTensor, rot) -> SteerableTensor:
    rot = np.asarray(rot, dtype=np.float64)
    values = x.values.copy()
    cache: dict[int, np.ndarray] = {}
    for c, l, sl in x.layout.slices():
        if l == 0 or c == 0:
            continue
        if l not in cache:
            cache[l] = wigner_d(l, rot)
        values[sl] = (values[sl].reshape(c, 2 * l + 1) @ cache[l].T).reshape(-1)
    return SteerableTensor(x.layout, values)


# --------------------------------------------------------------------------
# Clebsch-Gordan
# --------------------------------------------------------------------------


def _triangle(l1: int, l2: int, l3: int) -> bool:
    return abs(l1 - l2) <= l3 <= l1 + l2


def _racah(j1: int, m1: int, j2: int, m2: int, j3: int, m3: int) -> float:
    """<j1 m1 j2 m2 | j3 m3> by the Racah formula, exact in rationals."""
    if m1 + m2 != m3 or not _triangle(j1, j2, j3):
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m3) > j3:
        return 0.0
    f = math.factorial
    pre = Fraction(
        (2 * j3 + 1) * f(j3 + j1 - j2) * f(j3 - j1 + j2) * f(j1 + j2 - j3),
        f(j1 + j2 + j3 + 1),
    )
    pre *= f(j3 + m3) * f(j3 - m3) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)
    total = Fraction(0)
    for k in range(0, j1 + j2 - j3 + 1):
        terms = (
            k,
            j1 + j2 - j3 - k,
            j1 - m1 - k,
            j2 + m2 - k,
            j3 - j2 + m1 + k,
            j3 - j1 - m2 + k,
        )
        if min(terms) < 0:
            continue
        den = 1
        for t in terms:
            den *= f(t)
        total += Fraction((-1) ** k, den)
    return math.copysign(math.sqrt(float(pre)), 1.0) * float(total)


@lru_cache(maxsize=None)
def complex_cg(l1: int, l2: int, l3: int) -> np.ndarray:
    """Complex-basis CG coefficients, indexed ``[m1+l1, m2+l2, m3+l3]``."""
    c = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                c[m1 + l1, m2 + l2, m3 + l3] = _racah(l1, m1, l2, m2, l3, m3)
    return c


@lru_cache(maxsize=None)
def real_to_complex_basis(l: int) -> np.ndarray:
    """Unitary ``U`` with ``Y_real = U @ Y_complex``.

    ``Y_complex`` follows the standard (Condon-Shortley) complex harmonics,
    both indexed ``m = -l..l``.
    """
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    s = 1 / math.sqrt(2)
    u[l, l] = 1.0
    for m in range(1, l + 1):
        sign = (-1) ** m
        u[l + m, l + m] = sign * s
        u[l + m, l - m] = s
        u[l - m, l + m] = sign * s / 1j
        u[l - m, l - m] = -s / 1j
    return u


_cg_lock = threading.Lock()
_cg_cache: dict[tuple[int, int, int], np.ndarray] = {}
_cg_fault: float | None = None


def set_cg_fault(magnitude: float | None) -> None:
    """Corrupt every CG table returned from now on (negative-control hook).

    ``None`` restores the exact tables.
    """
    global _cg_fault
    _cg_fault = magnitude


def real_cg(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis coupling tensor of shape ``(2l1+1, 2l2+1, 2l3+1)``.

    ``out_k = sum_ij C[i, j, k] u_i v_j`` maps degree ``l1`` and ``l2`` inputs
    to a degree ``l3`` output equivariantly. Each table has unit Frobenius
    norm per output component, i.e. ``sum_ij C[i,j,k]**2 = 1``.
    """
    if min(l1, l2, l3) < 0 or not _triangle(l1, l2, l3):
        raise ValueError(f"({l1}, {l2}, {l3}) violates the triangle inequality")
    key = (l1, l2, l3)
    table = _cg_cache.get(key)
    if table is None:
        with _cg_lock:
            table = _cg_cache.get(key)
            if table is None:
                table = _build_real_cg(l1, l2, l3)
                table.setflags(write=False)
                _cg_cache[key] = table
    if _cg_fault is not None:
        rng = np.random.default_rng(hash(key) % 2**32)
        table = table + _cg_fault * rng.normal(size=table.shape)
    return table


def _build_real_cg(l1: int, l2: int, l3: int) -> np.ndarray:
    c = complex_cg(l1, l2, l3)
    u1, u2, u3 = (real_to_complex_basis(l) for l in (l1, l2, l3))
    # complex features u_c = U^H u_r; real output = U3 (C contracted)
    t = np.einsum("ai,bj,ijk,ck->abc", u1.conj(), u2.conj(), c, u3)
    # global phase i^(l1+l2-l3) makes every table real
    t = t * (1j) ** (l1 + l2 - l3)
    if np.abs(t.imag).max() > 1e-12:
        raise AssertionError(f"non-real CG table for {(l1, l2, l3)}")
    return np.ascontiguousarray(t.real)


def cg_contract(u: np.ndarray, v: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Batched coupling ``out[b, k, c] = sum_ij table[i, j, k] u[b, i, c] v[b, j, (c)]``.

    Channel-last layout: ``u`` has shape ``(B, d1, c)``; ``v`` is ``(B, d2)``
    (shared by all channels) or ``(B, d2, c)``. Returns ``(B, d3, c)``.
    """
    if v.ndim == 2:
        return np.matmul(np.einsum("bj,ijk->bki", v, table), u)
    return np.einsum("bic,bjc,ijk->bkc", u, v, table, optimize=True)


def cg_paths(degrees1: Sequence[int], degrees2: Sequence[int], degrees_out: Sequence[int]) -> list[tuple[int, int, int]]:
    return [
        (a, b, c)
        for a in degrees1
        for b in degrees2
        for c in degrees_out
        if _triangle(a, b, c)
    ]


def tensor_product(
    u: SteerableTensor,
    v: SteerableTensor,
    out_layout: IrrepsLayout,
    weights: dict[tuple[int, int, int], np.ndarray] | None = None,
) -> SteerableTensor:
    """Fully connected CG tensor product.

    For every output degree ``l`` the result sums all paths ``(l1, l2, l)``::

        out[w, :] = sum_{i,j} W[(l1,l2,l)][i, j, w] * CG(u[i], v[j])

    ``weights`` maps each path to an array of shape ``(mult1, mult2, mult_out)``;
    missing paths default to all-ones weights.
    """
    ub, vb = u.by_degree(), v.by_degree()
    out: dict[int, np.ndarray] = {}
    for mult_out, lo in out_layout.blocks:
        paths = [(a, b) for a in ub for b in vb if _triangle(a, b, lo)]
        if not paths:
            raise LayoutError(f"no path produces degree {lo} from {u.layout} x {v.layout}")
        acc = np.zeros((mult_out, 2 * lo + 1))
        for a, b in paths:
            m1, m2 = ub[a].shape[0], vb[b].shape[0]
            # every (i, j) channel pair becomes one channel of a batch of one
            uu = np.repeat(ub[a].T[:, :, None], m2, axis=2).reshape(1, 2 * a + 1, m1 * m2)
            vv = np.broadcast_to(vb[b].T[:, None, :], (2 * b + 1, m1, m2)).reshape(1, 2 * b + 1, m1 * m2)
            pair = cg_contract(uu, vv, real_cg(a, b, lo))[0].reshape(2 * lo + 1, m1, m2)
            w = None if weights is None else weights.get((a, b, lo))
            if w is None:
                w = np.ones((ub[a].shape[0], vb[b].shape[0], mult_out))
            acc = acc + np.einsum("kij,ijw->wk", pair, w)
        out.setdefault(lo, [])
        out[lo].append(acc)
    values = np.concatenate([blk.reshape(-1) for lo in sorted(out) for blk in out[lo]])
    return SteerableTensor(out_layout, values)
