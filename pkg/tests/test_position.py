import logging
import math

import numpy as np
import pytest
from scipy.special import eval_legendre

from empp.autodiff import Tape
from empp.checks import eq9_errors, small_model_config
from empp.data import Molecule, gen_synthetic
from empp.position import (
    EmppModel,
    MaskingError,
    RadialBins,
    build_batch,
    direction_label,
    direction_labels,
    eligible_atoms,
    empp_losses,
    empp_multi_loss,
    empp_single_loss,
    kl_div,
    kl_rows,
    mask_molecule,
    predict,
    predicted_position,
    radius_label,
    read_radius_csv,
    sample_mask_indices,
    write_radius_csv,
)
from empp.so3 import random_rotation
from empp.sphere import make_grid
from empp.train import SGD


@pytest.fixture(scope="module")
def grid():
    return make_grid(20, 20, lmax=2)


@pytest.fixture(scope="module")
def toy():
    return gen_synthetic("tetrahedral", 1, 0.05, seed=0).molecules[0]


def small_model(seed=0):
    return EmppModel(small_model_config(), seed=seed)


# -- labels -------------------------------------------------------------------


def test_bins():
    b = RadialBins()
    assert b.width == pytest.approx(0.03203125)
    assert b.centers[0] == pytest.approx(0.916015625)
    assert b.index(1.5) == 18
    assert b.index(10.0) == 127


def test_radius_label_frozen_values():
    q = radius_label(1.5)
    assert q.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.argmax(q) == 18
    assert RadialBins().centers[18] == pytest.approx(1.492578125)
    # frozen from an independent float64 evaluation of the normalised Gaussian
    assert q[18] == pytest.approx(0.028876028646888464, rel=1e-12)


def test_radius_label_symmetric_about_bin_edge():
    q = radius_label(2.95)  # edge between bins 63 and 64
    np.testing.assert_allclose(q[63 - np.arange(20)], q[64 + np.arange(20)], rtol=1e-12)


def test_radius_label_narrow_sigma_is_one_hot():
    q = radius_label(1.5, sigma=1e-4)
    assert q[18] == pytest.approx(1.0)
    assert np.delete(q, 18).max() < 1e-100


def test_radius_label_warns_out_of_range(caplog):
    with caplog.at_level(logging.WARNING, logger="empp.position"):
        q = radius_label(7.0)
    assert "3 sigma" in caplog.text
    assert np.argmax(q) == 127


def test_direction_label_addition_theorem(grid):
    d = np.array([0.2, -0.5, 0.7])
    d /= np.linalg.norm(d)
    c = grid.points @ d
    expo = sum((2 * l + 1) / (4 * math.pi) * eval_legendre(l, c) for l in range(3))
    expected = np.exp(expo) / np.exp(expo).sum()
    np.testing.assert_allclose(direction_label(d, grid), expected, rtol=1e-12)


def test_direction_label_argmax_at_nearest_node(grid):
    rng = np.random.default_rng(0)
    for d in rng.normal(size=(20, 3)):
        assert np.argmax(direction_label(d, grid)) == grid.nearest(d)


def test_direction_label_degree_zero_is_uniform(grid):
    q = direction_label([0, 0, 1.0], grid, lmax=0)
    np.testing.assert_allclose(q, 1.0 / grid.size)


def test_direction_label_quadrature_weighted(grid):
    q = direction_label([1.0, 0, 0], grid, quadrature_weighted=True)
    raw = direction_label([1.0, 0, 0], grid)
    np.testing.assert_allclose(q, raw * grid.weights / (raw * grid.weights).sum())


def test_batched_direction_labels(grid):
    dirs = np.random.default_rng(1).normal(size=(5, 3))
    batched = direction_labels(dirs, grid)
    for row, d in zip(batched, dirs):
        np.testing.assert_allclose(row, direction_label(d, grid), rtol=1e-12)


# -- KL -------------------------------------------------------------------------


def test_kl_basic_values():
    q = np.array([0.2, 0.3, 0.5])
    assert kl_div(q, q) == 0.0
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        kl_div([1.0], [0.5, 0.5])


def test_kl_floor():
    assert kl_div([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))


def test_kl_gibbs_inequality():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q, p = rng.dirichlet(np.ones(10)), rng.dirichlet(np.ones(10))
        assert kl_div(q, p) >= 0


def test_oracle_prediction_has_zero_loss(grid):
    q = direction_labels(np.random.default_rng(3).normal(size=(4, 3)), grid)
    t = Tape()
    np.testing.assert_allclose(kl_rows(t, q, t.constant(np.log(q))).value, 0.0, atol=1e-14)


# -- masking --------------------------------------------------------------------


def test_mask_errors(toy):
    with pytest.raises(IndexError):
        mask_molecule(toy, 5)
    far = Molecule([6, 1], [[0, 0, 0], [9.0, 0, 0]])
    with pytest.raises(MaskingError):
        mask_molecule(far, 1)
    assert len(eligible_atoms(far)) == 0
    with pytest.raises(MaskingError):
        sample_mask_indices(far, 1, np.random.default_rng(0))


def test_masked_molecule_bookkeeping(toy):
    mm = mask_molecule(toy, 2)
    assert mm.masked_z == 1
    assert 2 not in mm.neighbors
    assert mm.visible.tolist() == [0, 1, 3, 4]
    assert mm.visible_index(np.array([0, 1, 3, 4])).tolist() == [0, 1, 2, 3]
    np.testing.assert_allclose(mm.offsets(), toy.pos[2] - toy.pos[mm.neighbors])


def test_sample_mask_indices(toy):
    idx = sample_mask_indices(toy, 3, np.random.default_rng(0))
    assert len(set(idx.tolist())) == 3
    with pytest.raises(MaskingError):
        sample_mask_indices(toy, 6, np.random.default_rng(0))


# -- model and losses -------------------------------------------------------------


def test_distributions_are_normalised(toy, grid):
    (pred,) = predict(small_model(), mask_molecule(toy, 1), grid)
    assert pred.radius.shape == (4, 128)
    assert pred.direction.shape == (4, grid.size)
    np.testing.assert_allclose(pred.radius.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(pred.direction.sum(axis=1), 1.0, atol=1e-12)


def test_single_loss_matches_numpy_kl(toy, grid):
    model = small_model()
    mm = mask_molecule(toy, 1)
    loss = empp_single_loss(Tape(), model, mm, grid)
    (pred,) = predict(model, mm, grid)
    dist = np.linalg.norm(mm.offsets(), axis=1)
    rad = np.mean([kl_div(radius_label(d), p) for d, p in zip(dist, pred.radius)])
    q_dir = direction_labels(mm.offsets(), grid)
    dirn = np.mean([kl_div(q, p) for q, p in zip(q_dir, pred.direction)])
    assert float(loss.total.value) == pytest.approx(rad + dirn, rel=1e-10)


def test_multi_loss_single_index_is_bitwise_single(toy, grid):
    model = small_model()
    single = empp_single_loss(Tape(), model, mask_molecule(toy, 2), grid).total.value
    multi = empp_multi_loss(Tape(), model, toy, [2], grid).total.value
    assert single == multi


def test_multi_loss_is_mean_of_singles(toy, grid):
    model = small_model()
    idx = [0, 1, 3]
    singles = [float(empp_single_loss(Tape(), model, mask_molecule(toy, i), grid).total.value) for i in idx]
    multi = float(empp_multi_loss(Tape(), model, toy, idx, grid).total.value)
    assert multi == pytest.approx(np.mean(singles), rel=1e-14, abs=1e-15)


def test_symmetric_duplicates_give_equal_losses(grid):
    mol = gen_synthetic("tetrahedral", 1, 0.0, seed=0).molecules[0]
    loss = empp_losses(Tape(), small_model(), [mask_molecule(mol, i) for i in range(1, 5)], grid)
    # the grid lacks the tetrahedral symmetry, so only the radius term is exact
    rad = loss.radius.value
    np.testing.assert_allclose(rad, rad[0], rtol=1e-10)


def test_zero_mask_mlp_removes_attribute_dependence(toy, grid):
    model = small_model()
    swapped = Molecule(toy.z.copy(), toy.pos.copy())
    swapped.z[1] = 8
    a, b = mask_molecule(toy, 1), mask_molecule(swapped, 1)

    def encoded(mm):
        return model.encode(Tape(), build_batch([mm]))[0].value

    assert not np.allclose(encoded(a), encoded(b))
    model.mask_mlp.w[-1].value[...] = 0
    model.mask_mlp.b[-1].value[...] = 0
    np.testing.assert_array_equal(encoded(a), encoded(b))


def test_loss_decreases_on_toy(toy, grid):
    model = small_model()
    masked = [mask_molecule(toy, i) for i in range(5)]
    opt = SGD(model.parameters(), momentum=0.9)
    losses = []
    for _ in range(50):
        for p in model.parameters():
            p.zero_grad()
        t = Tape()
        loss = empp_losses(t, model, masked, grid).total
        t.backward(loss)
        opt.step(0.01)
        losses.append(float(loss.value))
    assert losses[-1] < 0.8 * losses[0]


def test_distribution_equivariance_small(grid):
    d, r = eq9_errors(small_model(), grid, n_molecules=3, n_rotations=2)
    assert d < 1e-6
    assert r < 1e-12


# -- point estimate ---------------------------------------------------------------


def test_point_estimate_single_neighbour():
    g = make_grid(100, 100)
    rad = radius_label(1.5, sigma=0.05)
    dirn = direction_label([0, 0, 1.0], g)
    mean, each = predicted_position(rad, dirn, np.zeros((1, 3)), g)
    assert each.shape == (1, 3)
    # the node nearest the pole sits one polar gap away from +z
    assert np.linalg.norm(mean) == pytest.approx(1.492578125)
    assert np.linalg.norm(mean - [0, 0, 1.492578125]) < 1.5 * g.angular_spacing()


def test_oracle_distributions_land_within_resolution():
    g = make_grid(100, 100)
    bins = RadialBins()
    for mol in gen_synthetic("tetrahedral", 10, 0.05, seed=1).molecules:
        mm = mask_molecule(mol, 1)
        off = mm.offsets()
        rad = np.stack([radius_label(np.linalg.norm(o)) for o in off])
        mean, each = predicted_position(rad, direction_labels(off, g), mol.pos[mm.neighbors], g, bins)
        bound = bins.width / 2 + np.linalg.norm(off, axis=1) * g.angular_spacing()
        assert np.all(np.linalg.norm(each - mm.target, axis=1) <= bound)


def test_point_estimate_rotates_with_input(toy):
    g = make_grid(100, 100, lmax=2)
    model = small_model()
    rot = random_rotation(np.random.default_rng(5))
    moved = toy.transformed(rot, np.zeros(3))
    p0 = predict(model, mask_molecule(toy, 1), g)[0]
    p1 = predict(model, mask_molecule(moved, 1), g)[0]
    m0, _ = predicted_position(p0.radius, p0.direction, p0.neighbor_positions, g)
    m1, _ = predicted_position(p1.radius, p1.direction, p1.neighbor_positions, g)
    # argmax nodes may shift by about one grid spacing after rotation
    assert np.linalg.norm(m1 - rot @ m0) < 5.0 * g.angular_spacing()


def test_radius_csv_round_trip(tmp_path):
    path = tmp_path / "r.csv"
    q = radius_label(2.0)
    write_radius_csv(path, q)
    assert path.read_text().splitlines()[0] == "bin_center,probability"
    centers, back = read_radius_csv(path)
    np.testing.assert_array_equal(back, q)
    np.testing.assert_array_equal(centers, RadialBins().centers)
    with pytest.raises(ValueError):
        write_radius_csv(path, q[:5])
