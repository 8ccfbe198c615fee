import numpy as np
import pytest

from empp.data import (
    Dataset,
    GeometryError,
    Molecule,
    ParseError,
    format_xyz,
    gen_synthetic,
    load_any,
    load_dataset,
    neighbor_list,
    pair_energy,
    parse_xyz,
    save_dataset,
    split,
    template,
    write_xyz,
)
from empp.so3 import random_rotation

WATER = """3
water energy=-76.4
O 0 0 0
H 0.9572 0 0
H -0.2400 0.9266 0
"""


def test_parse_water():
    (mol,) = parse_xyz(WATER)
    assert mol.z.tolist() == [8, 1, 1]
    assert mol.energy == pytest.approx(-76.4)
    np.testing.assert_allclose(mol.pos[2], [-0.24, 0.9266, 0])


def test_parse_empty():
    assert parse_xyz("") == []
    assert parse_xyz("\n\n") == []


def test_parse_extra_row_reports_line():
    text = "2\n\nH 0 0 0\nH 0 0 1\nH 0 0 2\n"
    with pytest.raises(ParseError) as err:
        parse_xyz(text)
    assert err.value.line == 5


@pytest.mark.parametrize(
    "text,line",
    [
        ("x\n\nH 0 0 0\n", 1),
        ("1\n\nQq 0 0 0\n", 3),
        ("2\n\nH 0 0 0\nC 0 zero 0\n", 4),
        ("2\n\nH 0 0 0\n", 4),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as err:
        parse_xyz(text)
    assert err.value.line == line


def test_parse_multiple_blocks_and_forces():
    text = WATER + "1\n\nC 1 2 3 0.1 0.2 0.3\n"
    mols = parse_xyz(text)
    assert len(mols) == 2
    np.testing.assert_allclose(mols[1].forces, [[0.1, 0.2, 0.3]])


def test_round_trip_is_idempotent(tmp_path):
    mols = gen_synthetic("chain", 3, 0.05, seed=1).molecules
    once = parse_xyz(format_xyz(mols))
    twice = parse_xyz(format_xyz(once))
    for a, b, c in zip(mols, once, twice):
        np.testing.assert_array_equal(a.pos, b.pos)
        np.testing.assert_array_equal(b.pos, c.pos)
        assert a.energy == b.energy == c.energy
    write_xyz(tmp_path / "m.xyz", mols)
    assert len(load_any(tmp_path / "m.xyz")) == 3


def test_neighbor_list_distances():
    assert len(neighbor_list(np.array([[0, 0, 0], [6.0, 0, 0]]), 5.0)[0]) == 0
    src, dst, vec, dist = neighbor_list(np.array([[0, 0, 0], [3.0, 0, 0]]), 5.0)
    assert sorted(zip(src.tolist(), dst.tolist())) == [(0, 1), (1, 0)]
    np.testing.assert_allclose(dist, 3.0)


def test_neighbor_list_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        pos = rng.uniform(-4, 4, size=(n, 3))
        src, dst, vec, dist = neighbor_list(pos, 5.0)
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        expected = {(j, k) for j in range(n) for k in range(n) if j != k and d[j, k] <= 5.0}
        assert set(zip(src.tolist(), dst.tolist())) == expected
        np.testing.assert_allclose(vec, pos[dst] - pos[src])
        np.testing.assert_allclose(dist, np.linalg.norm(vec, axis=1))


def test_neighbor_list_duplicate_positions():
    with pytest.raises(GeometryError):
        neighbor_list(np.zeros((2, 3)), 5.0)


def test_zero_jitter_samples_are_rigid():
    ds = gen_synthetic("planar_hex", 5, 0.0, seed=3)
    ref = None
    for mol in ds.molecules:
        d = np.sort(np.linalg.norm(mol.pos[:, None] - mol.pos[None], axis=-1).ravel())
        if ref is None:
            ref = d
        np.testing.assert_allclose(d, ref, atol=1e-12)


def test_generation_is_reproducible():
    a = gen_synthetic("tetrahedral", 10, 0.05, seed=7)
    b = gen_synthetic("tetrahedral", 10, 0.05, seed=7)
    for x, y in zip(a.molecules, b.molecules):
        np.testing.assert_array_equal(x.pos, y.pos)
        assert x.energy == y.energy


def test_tetrahedral_hydrogens_have_four_neighbours():
    for mol in gen_synthetic("tetrahedral", 50, 0.05, seed=2).molecules:
        src, _, _, _ = neighbor_list(mol.pos, 5.0)
        counts = np.bincount(src, minlength=5)
        assert counts[mol.z == 1].tolist() == [4, 4, 4, 4]


def test_template_geometry():
    z, pos = template("tetrahedral")
    np.testing.assert_allclose(np.linalg.norm(pos[1:], axis=1), 1.09)
    _, hexagon = template("planar_hex")
    np.testing.assert_allclose(np.linalg.norm(hexagon - np.roll(hexagon, 1, axis=0), axis=1), 1.39)
    _, chain = template("chain")
    np.testing.assert_allclose(np.linalg.norm(np.diff(chain, axis=0), axis=1), 1.5)


def test_generator_rejects_bad_arguments():
    with pytest.raises(ValueError):
        gen_synthetic("ring", 1, 0.05)
    with pytest.raises(ValueError):
        gen_synthetic("chain", 1, 0.2)


def test_label_is_rigid_motion_invariant():
    rng = np.random.default_rng(4)
    for mol in gen_synthetic("planar_hex", 10, 0.1, seed=5).molecules:
        moved = mol.transformed(random_rotation(rng), rng.normal(size=3) * 10)
        assert pair_energy(moved.pos) == pytest.approx(mol.energy, abs=1e-10)


def test_split_sizes_and_determinism():
    ds = gen_synthetic("chain", 100, 0.01, seed=0)
    s = split(ds, (0.8, 0.1, 0.1), seed=3)
    assert np.bincount(s.split, minlength=3).tolist() == [80, 10, 10]
    np.testing.assert_array_equal(s.split, split(ds, (0.8, 0.1, 0.1), seed=3).split)
    assert len(s.subset("train")) + len(s.subset("val")) + len(s.subset("test")) == 100
    assert np.all(split(ds, (1.0, 0, 0)).split == 0)
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.1, 0.1))


def test_dataset_cache_round_trip(tmp_path):
    ds = split(gen_synthetic("tetrahedral", 12, 0.05, seed=1), (0.5, 0.25, 0.25))
    ds.molecules[0].energy = None
    path = tmp_path / "d.bin"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.provenance == ds.provenance
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.molecules[0].energy is None
    for a, b in zip(ds.molecules, back.molecules):
        np.testing.assert_array_equal(a.pos, b.pos)
        np.testing.assert_array_equal(a.z, b.z)
    assert len(load_any(path)) == 12


def test_molecule_validation():
    with pytest.raises(ValueError):
        Molecule([1, 1], [[0, 0, 0]])
    with pytest.raises(ValueError):
        Molecule([1], [[np.nan, 0, 0]])
    assert len(Dataset([Molecule([1], [[0, 0, 0]])])) == 1
