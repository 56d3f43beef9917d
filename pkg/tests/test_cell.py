import json

import numpy as np
import pytest

from sdas import tensor as T
from sdas.cell import (FIXED, REMOVED, CellGraph, Genotype, SearchCell, UnresolvedError, cell_forward,
                       extract_genotype, genotype_to_dot, mixed_edge_forward, node_forward, parse_dot_edges)
from sdas.gradcheck import check_mixed_edge
from sdas.ops import build_operation, make_spec
from sdas.tensor import ShapeError, Tensor


def dx(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), dtype="double")


def edge_ops(graph, c, seed=0):
    rng = np.random.default_rng(seed)
    return {e.key: {o: build_operation(graph.spec_for(e.src, o), c, int(rng.integers(1 << 30)))
                    for o in e.candidates} for e in graph.edges.values()}


@pytest.fixture
def dbl():
    with T.precision("double"):
        yield


def test_edge_count_and_init(dbl):
    g = CellGraph("normal", "o2d", False)
    assert g.n_edges == 14 and len(list(g.intermediates)) == 4
    assert all(np.all(e.alpha.data == 0) and e.beta.data[0] == 0 for e in g.edges.values())


def test_strided_edges_and_channel_ops_omitted(dbl):
    g = CellGraph("st_reduction", "oadv", True)
    assert g.edge_stride(0) == (2, 2, 2) and g.edge_stride(2) == (1, 1, 1)
    assert "channel_scale" not in g.edges[(0, 2)].candidates
    assert "channel_scale" in g.edges[(2, 3)].candidates


def test_reduction_type_must_match_layout():
    with pytest.raises(ValueError):
        CellGraph("st_reduction", "o2d", False)


def test_uniform_mixture(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    ops = edge_ops(g, 2)
    x = dx((2, 2, 4, 4))
    e = g.edges[(0, 2)]
    expected = sum(ops[e.key][o](x).data for o in e.candidates) * 0.5 / 7
    np.testing.assert_allclose(mixed_edge_forward(e, ops[e.key], x).data, expected, rtol=1e-12, atol=1e-12)


def test_fixed_identity_with_live_beta(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    ops = edge_ops(g, 2)
    g.fix_edge(0, 2, "identity")
    x = dx((1, 2, 3, 3))
    np.testing.assert_array_equal(mixed_edge_forward(g.edges[(0, 2)], ops["0_2"], x).data, 0.5 * x.data)


def test_fixed_edge_equals_beta_times_op(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    ops = edge_ops(g, 2)
    e = g.edges[(1, 2)]
    e.alpha.data[3] = 2.0
    e.beta.data[0] = 0.7
    g.fix_edge(1, 2, "sep_conv_3x3")
    x = dx((2, 2, 4, 4))
    expected = T.sigmoid(e.beta).data[0] * ops["1_2"]["sep_conv_3x3"](x).data
    np.testing.assert_allclose(mixed_edge_forward(e, ops["1_2"], x).data, expected, rtol=1e-14)


def test_node_fixed_identities_sum(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    ops = edge_ops(g, 2)
    g.fix_edge(0, 2, "identity")
    g.fix_edge(1, 2, "identity")
    g.fix_node(2, [0, 1])
    a, b = dx((1, 2, 3, 3), 1), dx((1, 2, 3, 3), 2)
    np.testing.assert_array_equal(node_forward(g, 2, [a, b], ops).data, a.data + b.data)


def test_beta_limit_zero(dbl):
    g = CellGraph("normal", "o2d", False, n_int=2)
    ops = edge_ops(g, 2)
    for e in g.incoming(3):
        e.beta.data[0] = -40.0
    states = [dx((1, 2, 3, 3), s) for s in range(3)]
    assert np.abs(node_forward(g, 3, states, ops).data).max() < 1e-12


def test_three_predecessor_node_matches_naive_oracle(dbl):
    g = CellGraph("normal", "o2d", False, n_int=2)
    rng = np.random.default_rng(5)
    for e in g.edges.values():
        e.alpha.data[...] = rng.standard_normal(len(e.candidates))
        e.beta.data[...] = rng.standard_normal(1)
    ops = edge_ops(g, 2)
    states = [dx((2, 2, 4, 4), s) for s in range(3)]
    oracle = np.zeros_like(states[0].data)
    for j in range(3):
        e = g.edges[(j, 3)]
        a = np.exp(e.alpha.data) / np.exp(e.alpha.data).sum()
        b = 1 / (1 + np.exp(-e.beta.data[0]))
        for w, o in zip(a, e.candidates):
            oracle += b * w * ops[e.key][o](states[j]).data
    np.testing.assert_allclose(node_forward(g, 3, states, ops).data, oracle, rtol=1e-10, atol=1e-12)


def test_mixed_edge_gradients():
    assert check_mixed_edge("o2d", 2, seed=0, tol=1e-5).passed


def test_gradients_nonzero_then_absent(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    cell = SearchCell(g, 2, 2, 2, None, np.random.default_rng(0))
    x = dx((2, 2, 4, 4))
    T.backward(T.sum_all(T.mul(cell(x, x), cell(x, x))))
    for p in g.arch_parameters().values():
        assert np.any(p.grad != 0)
    g.fix_edge(0, 2, "sep_conv_3x3")
    assert "normal.alpha.0_2" not in g.arch_parameters()
    assert list(cell.edge_ops["0_2"].keys()) == ["sep_conv_3x3"]


def test_argmax_invariance(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    e = g.edges[(0, 2)]
    e.alpha.data[...] = np.random.default_rng(0).standard_normal(7)
    w0, pick0 = e.weights(), int(np.argmax(e.weights()))
    e.alpha.data += 123.0
    np.testing.assert_allclose(e.weights(), w0, atol=1e-12)
    assert int(np.argmax(e.weights())) == pick0


def test_cell_forward_shapes(dbl):
    rng = np.random.default_rng(0)
    normal = SearchCell(CellGraph("normal", "o2d", False), 16, 16, 16, None, rng)
    assert cell_forward(normal, dx((1, 16, 8, 8)), dx((1, 16, 8, 8))).shape == (1, 64, 8, 8)
    st = SearchCell(CellGraph("st_reduction", "o3d", True, n_int=2), 16, 16, 16, None, rng)
    assert cell_forward(st, dx((2, 16, 8, 8, 8)), dx((2, 16, 8, 8, 8))).shape == (2, 32, 4, 4, 4)


def test_cell_rejects_mismatched_inputs(dbl):
    cell = SearchCell(CellGraph("normal", "o2d", False, n_int=1), 2, 2, 2, None, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cell(dx((1, 2, 8, 8)), dx((1, 2, 4, 4)))


def test_fix_node_requires_fixed_edges(dbl):
    g = CellGraph("normal", "o2d", False, n_int=2)
    with pytest.raises(ValueError):
        g.fix_node(3, [0, 1])
    for j in range(3):
        g.fix_edge(j, 3, "identity")
    g.fix_node(3, [2, 0])
    assert g.node_state[3] == (0, 2) and g.edges[(1, 3)].state == REMOVED
    assert all(e.beta is None for e in g.incoming(3, live=False))


def _resolve(g, ops=None):
    for (j, i), e in g.edges.items():
        g.fix_edge(j, i, ops or e.candidates[(j + i) % len(e.candidates)])
    for i in g.intermediates:
        g.fix_node(i, [0, 1])


def test_extract_forced_topology(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    g.edges[(0, 2)].alpha.data[4] = 1.0
    g.edges[(1, 2)].alpha.data[2] = 1.0
    for j in (0, 1):
        e = g.edges[(j, 2)]
        g.fix_edge(j, 2, e.candidates[int(np.argmax(e.alpha.data))])
    g.fix_node(2, [0, 1])
    geno = extract_genotype({"normal": g})
    assert geno.cells["normal"]["nodes"] == [[(0, "sep_conv_5x5"), (1, "max_pool_3x3")]]


def test_extract_unresolved_lists_items(dbl):
    g = CellGraph("normal", "o2d", False, n_int=1)
    g.fix_edge(0, 2, "identity")
    with pytest.raises(UnresolvedError) as e:
        extract_genotype({"normal": g})
    assert "edge normal:1->2" in e.value.items and "node normal:2" in e.value.items


def test_genotype_roundtrip_and_dot(dbl):
    graphs = {ct: CellGraph(ct, "o2d", False) for ct in ("normal", "reduction")}
    for g in graphs.values():
        _resolve(g)
    geno = extract_genotype(graphs, {"seed": 3, "schedule": "C"})
    again = Genotype.from_json(geno.to_json())
    assert again == geno
    for ct in graphs:
        assert sorted(parse_dot_edges(genotype_to_dot(geno, ct))) == sorted(geno.edge_list(ct))
    g2 = CellGraph.from_genotype(geno, "normal")
    assert all(e.state in (FIXED, REMOVED) for e in g2.edges.values())


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d["cells"]["normal"]["nodes"][0].pop(), "pairs"),
    (lambda d: d["cells"]["normal"]["nodes"][0][0].__setitem__(1, "conv_9x9"), "not in"),
    (lambda d: d["cells"]["normal"]["nodes"][0][0].__setitem__(0, 5), "precede"),
    (lambda d: d["meta"].__setitem__("op_set", "o9"), "op_set"),
])
def test_genotype_validation(dbl, mutate, msg):
    g = CellGraph("normal", "o2d", False, n_int=2)
    _resolve(g)
    d = extract_genotype({"normal": g}).to_dict()
    mutate(d)
    with pytest.raises(ValueError, match=msg):
        Genotype.from_json(json.dumps(d))
