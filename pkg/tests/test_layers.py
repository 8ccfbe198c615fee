import math

import numpy as np
import pytest

from empp.autodiff import Tape
from empp.checkpoint import CheckpointError, read_container, write_container
from empp.data import gen_synthetic, neighbor_list
from empp.layers import (
    AtomEmbedding,
    Backbone,
    BackboneConfig,
    EquiLinear,
    EquiNorm,
    Graph,
    apply_gate,
    equi_linear,
    equi_norm,
    gate_layout,
    gaussian_basis,
    rotate_features,
)
from empp.so3 import IrrepsLayout, LayoutError, SteerableTensor, random_rotation, rotate_steerable, wigner_d


def random_tensor(layout, seed=0):
    lay = IrrepsLayout.parse(layout)
    return SteerableTensor(lay, np.random.default_rng(seed).normal(size=lay.dim))


def test_equi_linear_commutes_with_rotation():
    rng = np.random.default_rng(0)
    layer = EquiLinear("lin", {0: 3, 1: 2, 2: 2}, {0: 4, 1: 3, 2: 1}, rng)
    layer.bias.value[...] = rng.normal(size=4)
    x = random_tensor("3x0+2x1+2x2", 1)
    rot = random_rotation(rng)
    a = equi_linear(rotate_steerable(x, rot), layer)
    b = rotate_steerable(equi_linear(x, layer), rot)
    np.testing.assert_allclose(a.values, b.values, atol=1e-10)


def test_equi_linear_zero_weights():
    rng = np.random.default_rng(0)
    layer = EquiLinear("lin", {0: 2, 1: 2}, {0: 2, 1: 2}, rng)
    for w in layer.weights.values():
        w.value[...] = 0
    layer.bias.value[...] = [0.5, -1.0]
    out = equi_linear(random_tensor("2x0+2x1"), layer).by_degree()
    np.testing.assert_array_equal(out[0][:, 0], [0.5, -1.0])
    assert not out[1].any()


def test_equi_linear_needs_input_degree():
    with pytest.raises(LayoutError):
        EquiLinear("lin", {0: 2}, {0: 2, 1: 1}, np.random.default_rng(0))


def test_gate_saturated_and_neutral():
    mults = {0: 1, 1: 2}
    assert gate_layout(mults) == {0: 3, 1: 2}
    x = random_tensor("3x0+2x1", 2)
    blocks = x.by_degree()
    blocks[0][1:, 0] = 40.0
    out = apply_gate(SteerableTensor.from_degrees(blocks), mults).by_degree()
    np.testing.assert_allclose(out[1], blocks[1], rtol=1e-15, atol=1e-15)
    s = blocks[0][0, 0]
    assert out[0][0, 0] == pytest.approx(s / (1 + math.exp(-s)))
    blocks[0][1:, 0] = 0.0
    out = apply_gate(SteerableTensor.from_degrees(blocks), mults).by_degree()
    np.testing.assert_allclose(out[1], 0.5 * blocks[1])


def test_gate_rotation_equivariant():
    x = random_tensor("5x0+2x1+1x2", 3)
    rot = random_rotation(np.random.default_rng(3))
    mults = {0: 2, 1: 2, 2: 1}
    a = apply_gate(rotate_steerable(x, rot), mults)
    b = rotate_steerable(apply_gate(x, mults), rot)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_norm_single_vector_channel():
    x = SteerableTensor(IrrepsLayout([(1, 1)]), [0.0, 2.0, 0.0])
    out = equi_norm(x, EquiNorm("n", {1: 1}))
    assert np.linalg.norm(out.values) == pytest.approx(1.0, abs=1e-8)


def test_norm_centres_scalars_only():
    x = SteerableTensor(IrrepsLayout([(3, 0)]), [1.0, 2.0, 3.0])
    out = equi_norm(x, EquiNorm("n", {0: 3})).values
    assert out.sum() == pytest.approx(0.0, abs=1e-12)
    assert np.sqrt(np.mean(out**2)) == pytest.approx(1.0, abs=1e-7)


def test_embedding_range():
    emb = AtomEmbedding("e", 4, np.random.default_rng(0))
    t = Tape()
    assert emb(t, [6, 1]).shape == (2, 4)
    for bad in ([0], [119]):
        with pytest.raises(ValueError):
            emb(t, bad)


def test_gaussian_basis_width_is_spacing():
    b = gaussian_basis(np.array([0.0, 1.0 / 3]), 0.0, 5.0, 16)
    assert b.shape == (2, 16)
    assert b[0, 0] == 1.0
    assert b[1, 1] == pytest.approx(1.0)
    assert b[1, 0] == pytest.approx(math.exp(-0.5))


def molecule_graph(pos, z, cutoff=5.0):
    src, dst, _, _ = neighbor_list(pos, cutoff)
    return Graph(np.asarray(z), pos, np.zeros(len(z), dtype=int), 1, src, dst)


def test_backbone_equivariance():
    cfg = BackboneConfig(layers=2, hidden="8x0+4x1+4x2+2x3")
    net = Backbone(cfg, np.random.default_rng(0))
    mol = gen_synthetic("planar_hex", 1, 0.1, seed=4).molecules[0]
    rot = random_rotation(np.random.default_rng(9))
    a = net(Tape(), molecule_graph(mol.pos, mol.z))
    b = net(Tape(), molecule_graph(mol.pos @ rot.T + 1.5, mol.z))
    d = {l: wigner_d(l, rot) for l in range(4)}
    rotated = rotate_features({l: x.value for l, x in a.items()}, d)
    for l in range(4):
        np.testing.assert_allclose(b[l].value, rotated[l], atol=1e-10)


def test_single_atom_gets_self_updates_only():
    cfg = BackboneConfig(layers=3, hidden="4x0+2x1+2x2")
    net = Backbone(cfg, np.random.default_rng(1))
    graph = molecule_graph(np.zeros((1, 3)), [6])
    out = net(Tape(), graph)
    emb = net.embedding.table.value[6]
    # with no messages a layer adds norm(gate(bias)), independent of its input
    expected = emb.copy()
    for layer in net.layers:
        b = layer.linear.bias.value
        s = b[:4]
        h0 = s / (1 + np.exp(-s))
        h0 = h0 - h0.mean()
        h0 = h0 / (np.sqrt(np.mean(h0**2)) + 1e-8) * layer.norm.affine[0].value
        expected = expected + h0
    np.testing.assert_allclose(out[0].value[0, 0], expected, atol=1e-12)
    assert not out[1].value.any() and not out[2].value.any()


def test_module_state_round_trip(tmp_path):
    cfg = BackboneConfig(layers=1, hidden="4x0+2x1+2x2")
    a = Backbone(cfg, np.random.default_rng(0))
    b = Backbone(cfg, np.random.default_rng(1))
    path = tmp_path / "net.ckpt"
    write_container(path, a.state_dict(), {"note": "hello"})
    arrays, text = read_container(path)
    assert text == {"note": "hello"}
    b.load_state_dict(arrays)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)


def test_container_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTMAGIC")
    with pytest.raises(CheckpointError):
        read_container(path)
    write_container(path, {"w": np.arange(6.0).reshape(2, 3)})
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        read_container(path)


def test_container_layout(tmp_path):
    path = tmp_path / "x.ckpt"
    write_container(path, {"ab": np.array([[1.5, 2.0]])})
    raw = path.read_bytes()
    assert raw[:8] == b"EMPPCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 2
    assert raw[16:18] == b"ab"
    assert int.from_bytes(raw[18:22], "little") == 2
    assert np.frombuffer(raw[30:], "<f8").tolist() == [1.5, 2.0]
