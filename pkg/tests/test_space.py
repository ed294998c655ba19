import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adanas import tensor as T
from adanas.errors import ConfigError, DataError, ValidationError
from adanas.ops import ALL_OPERATIONS, CellTopology, ChildGraph, OperationKind
from adanas.space import (ArchParams, ArchSample, ChildNet, SuperNet,
                          cell_forward, derive_child, encode_child_as_logits,
                          gumbel_softmax, mixed_edge_forward, sample_architecture,
                          straight_through)

from oracles import naive_softmax


def small_supernet(n_nodes=1, k_max=2, embed_dim=6, vocab=11, classes=2, seed=0,
                   operations=ALL_OPERATIONS):
    return SuperNet(CellTopology(n_nodes), k_max, embed_dim, vocab, classes,
                    seed=seed, operations=operations)


def onehot(n, i):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def hard_sample_for(net, child):
    ops = list(net.operations)
    y_k = T.constant(onehot(net.k_max, child.k - 1))
    y_edges = [T.constant(onehot(len(ops), ops.index(child.ops[e])))
               for e in net.topology.edges]
    return ArchSample(y_k=y_k, y_edges=y_edges)


# ---------------------------------------------------------------------------
# operation set and topology
# ---------------------------------------------------------------------------

def test_operation_set_has_ten_members():
    assert len(ALL_OPERATIONS) == 10
    assert OperationKind.DIL_CONV_5.dilation == 2
    assert OperationKind.STD_CONV_7.kernel_size == 7
    assert not OperationKind.SKIP.is_conv


def test_topology_edge_count():
    assert CellTopology(3).num_edges == 9
    assert CellTopology(1).num_edges == 2
    for i, j in CellTopology(3).edges:
        assert i < j and 2 <= j <= 4


# ---------------------------------------------------------------------------
# gumbel softmax and straight-through
# ---------------------------------------------------------------------------

def test_gumbel_sample_normalizes():
    theta = T.parameter(np.array([0.3, -1.2, 2.0]))
    y = gumbel_softmax(theta, tau=0.7, rng=np.random.default_rng(0))
    assert abs(y.data.sum() - 1.0) <= 1e-12


def test_gumbel_low_tau_approaches_one_hot():
    theta = T.parameter(np.array([0.5, 0.1, -0.3]))
    noise = np.array([0.2, 1.4, -0.6])
    y = gumbel_softmax(theta, tau=1e-3, noise=noise)
    assert y.data.max() > 1.0 - 1e-9
    assert int(np.argmax(y.data)) == int(np.argmax(theta.data + noise))


def test_gumbel_matches_formula_oracle():
    theta = T.parameter(np.log([0.7, 0.3]))
    noise = np.array([0.1, -0.2])
    y = gumbel_softmax(theta, tau=1.0, noise=noise)
    expected = naive_softmax([np.log(0.7) + 0.1, np.log(0.3) - 0.2])
    np.testing.assert_allclose(y.data, expected, atol=1e-12)


def test_gumbel_rejects_nonpositive_tau():
    with pytest.raises(ConfigError):
        gumbel_softmax(T.parameter(np.zeros(3)), tau=0.0, noise=np.zeros(3))


def test_gumbel_argmax_statistics_small():
    theta_np = np.array([1.0, 0.0, -1.0])
    probs = naive_softmax(theta_np)
    rng = np.random.default_rng(7)
    theta = T.parameter(theta_np)
    hits = np.zeros(3)
    trials = 4000
    for _ in range(trials):
        y = gumbel_softmax(theta, tau=1.0, rng=rng)
        hits[int(np.argmax(y.data))] += 1
    np.testing.assert_allclose(hits / trials, probs, atol=0.03)


def test_straight_through_forward_and_backward():
    y = T.parameter(np.array([0.2, 0.5, 0.3]))
    with T.Tape() as tape:
        hard = straight_through(y)
        loss = T.tensor_sum(T.mul(hard, T.constant([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(hard.data, [0.0, 1.0, 0.0])
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, [1.0, 2.0, 3.0])  # pass-through


def test_straight_through_tie_breaks_low_index():
    hard = straight_through(T.constant([0.5, 0.5]))
    np.testing.assert_array_equal(hard.data, [1.0, 0.0])


# ---------------------------------------------------------------------------
# mixed edges and cells
# ---------------------------------------------------------------------------

def test_mixed_edge_skip_zero_and_soft():
    net = small_supernet()
    h = T.constant(np.random.default_rng(1).normal(size=(2, 6, 5)))
    ops = list(net.operations)
    skip_vec = T.constant(onehot(len(ops), ops.index(OperationKind.SKIP)))
    zero_vec = T.constant(onehot(len(ops), ops.index(OperationKind.ZERO)))
    edge = net.topology.edges[0]
    out_skip = mixed_edge_forward(h, edge, skip_vec, net.layers[0], ops, "train")
    np.testing.assert_array_equal(out_skip.data, h.data)
    out_zero = mixed_edge_forward(h, edge, zero_vec, net.layers[0], ops, "train")
    assert np.all(out_zero.data == 0.0)
    soft = np.zeros(len(ops))
    soft[ops.index(OperationKind.SKIP)] = 0.5
    soft[ops.index(OperationKind.ZERO)] = 0.5
    out_soft = mixed_edge_forward(h, edge, T.constant(soft), net.layers[0], ops, "train")
    np.testing.assert_allclose(out_soft.data, 0.5 * h.data, atol=1e-12)


def test_cell_all_zero_edges_outputs_zero():
    net = small_supernet(n_nodes=2)
    ops = list(net.operations)
    zero_vec = T.constant(onehot(len(ops), ops.index(OperationKind.ZERO)))
    vecs = [zero_vec] * net.topology.num_edges
    x = T.constant(np.random.default_rng(2).normal(size=(1, 6, 4)))
    out = cell_forward(x, x, net.layers[0], vecs, net.topology, ops, "train")
    assert np.all(out.data == 0.0)


def test_cell_all_skip_output_collinear_with_input():
    net = small_supernet(n_nodes=3)
    ops = list(net.operations)
    skip_vec = T.constant(onehot(len(ops), ops.index(OperationKind.SKIP)))
    vecs = [skip_vec] * net.topology.num_edges
    x_np = np.random.default_rng(3).normal(size=(2, 6, 4))
    x = T.constant(x_np)
    out = cell_forward(x, x, net.layers[0], vecs, net.topology, ops, "train")
    for b in range(2):
        ratios = out.data[b] / x_np[b]
        assert np.allclose(ratios, ratios.flat[0], atol=1e-9)
        assert ratios.flat[0] > 0


def test_cell_identity_stencil_matches_composition_oracle():
    # single conv edge into the only intermediate node; other edge zeroed
    net = small_supernet(n_nodes=1)
    ops = list(net.operations)
    conv_idx = ops.index(OperationKind.STD_CONV_3)
    params = net.layers[0].ops[((0, 2), OperationKind.STD_CONV_3)]
    params.kernel.data = np.zeros_like(params.kernel.data)
    for c in range(6):
        params.kernel.data[c, c, 1] = 1.0  # identity stencil
    vecs = [T.constant(onehot(len(ops), conv_idx)),
            T.constant(onehot(len(ops), ops.index(OperationKind.ZERO)))]
    x_np = np.abs(np.random.default_rng(4).normal(size=(1, 6, 5))) + 0.1
    x = T.constant(x_np)
    out = cell_forward(x, x, net.layers[0], vecs, net.topology, ops, "eval")
    # oracle: relu (identity on positives) -> identity conv -> unit batchnorm
    expected = x_np / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_allclose(out.data, x_np, rtol=1e-4)


# ---------------------------------------------------------------------------
# supernet forward
# ---------------------------------------------------------------------------

def test_supernet_hard_k_selects_probe_logits():
    net = small_supernet(n_nodes=1, k_max=3)
    ids = np.random.default_rng(5).integers(0, 11, size=(2, 5))
    x = net.embed(ids)
    child = ChildGraph(k=2, n_nodes=1,
                       ops={(0, 2): OperationKind.STD_CONV_3,
                            (1, 2): OperationKind.SKIP},
                       embed_dim=6)
    sample = hard_sample_for(net, child)
    out = net.forward(x, x, sample, bn_mode="train")
    np.testing.assert_array_equal(out.final_logits.data, out.layer_logits[1].data)


def test_supernet_soft_uniform_k_averages_probe_logits():
    net = small_supernet(n_nodes=1, k_max=2)
    ids = np.random.default_rng(6).integers(0, 11, size=(2, 5))
    x = net.embed(ids)
    ops = list(net.operations)
    skip_vec = T.constant(onehot(len(ops), ops.index(OperationKind.SKIP)))
    sample = ArchSample(y_k=T.constant([0.5, 0.5]),
                        y_edges=[skip_vec] * net.topology.num_edges)
    out = net.forward(x, x, sample, bn_mode="train")
    expected = 0.5 * (out.layer_logits[0].data + out.layer_logits[1].data)
    np.testing.assert_allclose(out.final_logits.data, expected, atol=1e-12)


def test_supernet_rejects_empty_batch():
    net = small_supernet()
    x = T.constant(np.zeros((0, 6, 5)))
    sample = sample_architecture(net.arch, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        net.forward(x, x, sample)


def test_supernet_shape_preserved_for_every_operation():
    net = small_supernet(n_nodes=1, embed_dim=6)
    x = T.constant(np.random.default_rng(8).normal(size=(2, 6, 7)))
    ops = list(net.operations)
    for idx, op in enumerate(ops):
        vec = T.constant(onehot(len(ops), idx))
        out = mixed_edge_forward(x, net.topology.edges[0], vec, net.layers[0],
                                 ops, "train")
        assert out.shape == x.shape, op


# ---------------------------------------------------------------------------
# child derivation and serialization
# ---------------------------------------------------------------------------

def test_derive_child_argmax_examples():
    topo = CellTopology(1)
    arch = ArchParams(k_max=4, num_edges=2, num_ops=len(ALL_OPERATIONS))
    arch.theta_k.data = np.array([0.1, 2.0, 0.3, 0.0])
    arch.theta_edges[0].data[ALL_OPERATIONS.index(OperationKind.ZERO)] = 3.0
    child = derive_child(arch, topo)
    assert child.k == 2
    assert child.ops[(0, 2)] is OperationKind.ZERO
    assert child.ops[(1, 2)] is OperationKind.STD_CONV_3  # all-equal tie -> first


def test_derive_child_all_equal_logits_tie_rule():
    topo = CellTopology(2)
    arch = ArchParams(k_max=3, num_edges=topo.num_edges, num_ops=10)
    child = derive_child(arch, topo)
    assert child.k == 1
    assert all(op is OperationKind.STD_CONV_3 for op in child.ops.values())


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10**9))
def test_derive_is_inverse_of_peaked_encoding(seed):
    rng = np.random.default_rng(seed)
    topo = CellTopology(3)
    k_max = 8
    ops = {e: ALL_OPERATIONS[int(rng.integers(0, 10))] for e in topo.edges}
    child = ChildGraph(k=int(rng.integers(1, k_max + 1)), n_nodes=3, ops=ops)
    arch = encode_child_as_logits(child, k_max)
    derived = derive_child(arch, topo)
    assert derived.k == child.k and derived.ops == child.ops


def test_child_round_trip(tmp_path):
    topo = CellTopology(3)
    rng = np.random.default_rng(11)
    ops = {e: ALL_OPERATIONS[int(rng.integers(0, 10))] for e in topo.edges}
    child = ChildGraph(k=5, n_nodes=3, ops=ops, task_type="text_pair", embed_dim=32)
    path = tmp_path / "child.json"
    child.save(path)
    loaded = ChildGraph.load(path)
    assert loaded == child
    assert loaded.encode() == child.encode()


def test_child_file_rejects_unknown_op(tmp_path):
    child = ChildGraph(k=1, n_nodes=1,
                       ops={(0, 2): OperationKind.SKIP, (1, 2): OperationKind.ZERO})
    payload = child.to_dict()
    payload["edges"][0]["op"] = "conv_999"
    path = tmp_path / "bad.json"
    path.write_text(__import__("json").dumps(payload))
    with pytest.raises(ValidationError):
        ChildGraph.load(path)


def test_child_file_rejects_bad_schema(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema_version": 99}')
    with pytest.raises(DataError):
        ChildGraph.load(path)


# ---------------------------------------------------------------------------
# child network
# ---------------------------------------------------------------------------

def test_child_matches_hard_supernet_with_copied_weights():
    net = small_supernet(n_nodes=2, k_max=3, embed_dim=6, seed=3)
    child = ChildGraph(
        k=2, n_nodes=2,
        ops={(0, 2): OperationKind.STD_CONV_3, (1, 2): OperationKind.MAX_POOL_3,
             (0, 3): OperationKind.SKIP, (1, 3): OperationKind.DIL_CONV_5,
             (2, 3): OperationKind.AVG_POOL_3},
        embed_dim=6)
    childnet = ChildNet(child, vocab_size=11, num_classes=2, seed=99)
    childnet.copy_weights_from_supernet(net)
    ids = np.random.default_rng(12).integers(0, 11, size=(3, 6))
    sup_out = net.forward(net.embed(ids), net.embed(ids),
                          hard_sample_for(net, child), bn_mode="train")
    child_logits = childnet.forward(childnet.embed(ids), childnet.embed(ids),
                                    bn_mode="train")
    np.testing.assert_allclose(child_logits.data, sup_out.final_logits.data, atol=1e-12)


def test_all_zero_child_is_constant_predictor():
    child = ChildGraph(k=2, n_nodes=1,
                       ops={(0, 2): OperationKind.ZERO, (1, 2): OperationKind.ZERO},
                       embed_dim=6)
    net = ChildNet(child, vocab_size=11, num_classes=2, seed=0)
    rng = np.random.default_rng(13)
    ids1 = rng.integers(0, 11, size=(2, 5))
    ids2 = rng.integers(0, 11, size=(2, 5))
    out1 = net.forward(net.embed(ids1), net.embed(ids1), bn_mode="eval")
    out2 = net.forward(net.embed(ids2), net.embed(ids2), bn_mode="eval")
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


def test_k1_child_executes_exactly_one_cell():
    child = ChildGraph(k=1, n_nodes=1,
                       ops={(0, 2): OperationKind.SKIP, (1, 2): OperationKind.SKIP},
                       embed_dim=6)
    net = ChildNet(child, vocab_size=11, num_classes=2, seed=0)
    ids = np.random.default_rng(14).integers(0, 11, size=(2, 5))
    net.forward(net.embed(ids), net.embed(ids), bn_mode="eval")
    assert net.cells_executed == 1


def test_sampled_architecture_straight_through_is_one_hot():
    net = small_supernet(n_nodes=3, k_max=4)
    rng = np.random.default_rng(15)
    for _ in range(50):
        sample = sample_architecture(net.arch, rng, hard=True)
        assert np.count_nonzero(sample.y_k.data) == 1 and sample.y_k.data.max() == 1.0
        for vec in sample.y_edges:
            assert np.count_nonzero(vec.data) == 1 and vec.data.max() == 1.0
