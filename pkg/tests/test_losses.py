import math

import numpy as np
import pytest

from adanas import tensor as T
from adanas.errors import ConfigError, ValidationError
from adanas.losses import (LossConfig, attentive_kd_loss, attentive_weights,
                           build_cost_table, child_cell_flops,
                           child_op_param_count, child_param_count,
                           cost_report_text, efficiency_loss, kd_instance_loss,
                           layer_map, total_loss)
from adanas.ops import ALL_OPERATIONS, CellTopology, ChildGraph, OperationKind
from adanas.space import ChildNet
from adanas.teacher import (ProbeSet, TeacherExample, TeacherView,
                            teacher_probe_probs)

from oracles import naive_softmax, naive_xent


def random_child(rng, n_nodes=3, k_max=8):
    topo = CellTopology(n_nodes)
    ops = {e: ALL_OPERATIONS[int(rng.integers(0, len(ALL_OPERATIONS)))]
           for e in topo.edges}
    return ChildGraph(k=int(rng.integers(1, k_max + 1)), n_nodes=n_nodes, ops=ops)


def brute_force_efficiency(child, table, k_max):
    """Independent summation straight off the cost table."""
    total = 0.0
    for op in child.ops.values():
        e = table.entries[op]
        total += e.size_norm + e.flops_norm
    return (child.k / k_max) * total


# ---------------------------------------------------------------------------
# cost table
# ---------------------------------------------------------------------------

def test_cost_table_zero_and_skip_are_free():
    table = build_cost_table(128, 128)
    for op in (OperationKind.SKIP, OperationKind.ZERO):
        entry = table.entries[op]
        assert entry.raw_params == 0 and entry.raw_flops == 0
        assert entry.size_norm == 0.0 and entry.flops_norm == 0.0


def test_cost_table_conv7_is_the_anchor():
    table = build_cost_table(128, 128)
    e = table.entries[OperationKind.STD_CONV_7]
    assert e.size_norm == 1.0 and e.flops_norm == 1.0
    assert table.entries[OperationKind.DIL_CONV_7].size_norm == 1.0


def test_cost_table_pool_params_are_zero():
    table = build_cost_table(64, 32)
    for op in (OperationKind.MAX_POOL_3, OperationKind.AVG_POOL_3):
        assert table.entries[op].raw_params == 0
        assert table.entries[op].raw_flops == 3 * 64 * 32


def test_cost_table_conv3_to_conv7_ratio():
    c = 128
    table = build_cost_table(c, 128)

    def oracle_params(k):
        # count weights of an instantiated conv block: kernel + bias + bn affine
        return k * c * c + c + 2 * c

    expected = oracle_params(3) / oracle_params(7)
    got = (table.entries[OperationKind.STD_CONV_3].size_norm /
           table.entries[OperationKind.STD_CONV_7].size_norm)
    assert abs(got - expected) < 1e-12


# ---------------------------------------------------------------------------
# efficiency loss
# ---------------------------------------------------------------------------

def test_efficiency_all_zero_edges_costs_nothing():
    table = build_cost_table(128, 128)
    topo = CellTopology(3)
    child = ChildGraph(k=5, n_nodes=3, ops={e: OperationKind.ZERO for e in topo.edges})
    out = efficiency_loss(child, None, table, k_max=8)
    assert out.item() == 0.0


def test_efficiency_normalization_anchor_is_18():
    table = build_cost_table(128, 128)
    topo = CellTopology(3)
    child = ChildGraph(k=8, n_nodes=3,
                       ops={e: OperationKind.STD_CONV_7 for e in topo.edges})
    out = efficiency_loss(child, None, table, k_max=8)
    assert abs(out.item() - 18.0) < 1e-12


def test_efficiency_matches_brute_force_on_random_children():
    table = build_cost_table(128, 128)
    rng = np.random.default_rng(0)
    for _ in range(200):
        child = random_child(rng)
        got = efficiency_loss(child, None, table, k_max=8).item()
        assert abs(got - brute_force_efficiency(child, table, 8)) <= 1e-12


def test_efficiency_monotone_under_zero_replacement():
    table = build_cost_table(128, 128)
    rng = np.random.default_rng(1)
    for _ in range(50):
        child = random_child(rng)
        base = efficiency_loss(child, None, table, k_max=8).item()
        edge = list(child.ops)[int(rng.integers(0, len(child.ops)))]
        cheaper = ChildGraph(k=child.k, n_nodes=child.n_nodes,
                             ops={**child.ops, edge: OperationKind.ZERO})
        assert efficiency_loss(cheaper, None, table, k_max=8).item() <= base


def test_efficiency_strictly_increases_with_k_when_cell_costs():
    table = build_cost_table(128, 128)
    topo = CellTopology(3)
    ops = {e: OperationKind.SKIP for e in topo.edges}
    ops[(0, 2)] = OperationKind.AVG_POOL_3
    lo = efficiency_loss(ChildGraph(k=2, n_nodes=3, ops=ops), None, table, k_max=8)
    hi = efficiency_loss(ChildGraph(k=3, n_nodes=3, ops=ops), None, table, k_max=8)
    assert hi.item() > lo.item()


def test_efficiency_gradient_reaches_theta_via_straight_through():
    from adanas.space import gumbel_softmax, straight_through

    table = build_cost_table(128, 128)
    theta = T.parameter(np.zeros(len(ALL_OPERATIONS)))
    theta_k = T.parameter(np.zeros(4))
    noise_e = np.linspace(0.4, -0.3, len(ALL_OPERATIONS))  # selects a conv
    noise_k = np.array([0.1, -0.2, 0.3, 0.0])
    with T.Tape() as tape:
        y_e = straight_through(gumbel_softmax(theta, 1.0, noise=noise_e))
        y_k = straight_through(gumbel_softmax(theta_k, 1.0, noise=noise_k))
        loss = efficiency_loss([y_e, y_e], y_k, table)
    tape.backward(loss)
    assert theta.grad is not None and np.any(theta.grad != 0.0)
    assert theta_k.grad is not None and np.any(theta_k.grad != 0.0)


# ---------------------------------------------------------------------------
# layer map
# ---------------------------------------------------------------------------

def test_layer_map_examples():
    assert [layer_map(i, 3, 12) for i in (1, 2, 3)] == [4, 8, 12]
    assert [layer_map(i, 12, 12) for i in range(1, 13)] == list(range(1, 13))
    assert [layer_map(i, 8, 12) for i in range(1, 9)] == [2, 3, 5, 6, 8, 9, 11, 12]


def test_layer_map_bounds_and_monotonicity():
    for j in (1, 5, 12):
        for k in range(1, 13):
            values = [layer_map(i, k, j) for i in range(1, k + 1)]
            assert all(1 <= v <= j for v in values)
            assert values == sorted(values)
            assert values[-1] == j
    with pytest.raises(ValidationError):
        layer_map(0, 3, 12)
    with pytest.raises(ValidationError):
        layer_map(4, 3, 12)


# ---------------------------------------------------------------------------
# distillation losses
# ---------------------------------------------------------------------------

def test_kd_instance_perfect_mimicry_is_near_zero():
    out = kd_instance_loss(np.array([1.0, 0.0]), T.constant([30.0, -30.0]))
    assert out.item() <= 1e-9


def test_kd_instance_uniform_teacher_bound():
    n = 4
    teacher = np.full(n, 1.0 / n)
    rng = np.random.default_rng(2)
    for _ in range(20):
        student = T.constant(rng.normal(size=n))
        assert kd_instance_loss(teacher, student).item() >= math.log(n) - 1e-12
    uniform_student = T.constant(np.zeros(n))
    assert abs(kd_instance_loss(teacher, uniform_student).item() - math.log(n)) <= 1e-12


def test_kd_instance_matches_formula_oracle():
    got = kd_instance_loss(np.array([0.7, 0.3]), T.constant([1.0, 0.0]), 1.0)
    assert abs(got.item() - naive_xent([1.0, 0.0], [0.7, 0.3])) < 1e-12


def test_kd_instance_gibbs_inequality():
    rng = np.random.default_rng(3)
    for _ in range(50):
        teacher = naive_softmax(rng.normal(size=5))
        student = rng.normal(size=5)
        loss = kd_instance_loss(teacher, T.constant(student)).item()
        entropy = -float(np.sum(teacher * np.log(teacher)))
        assert loss >= entropy - 1e-12
    teacher = naive_softmax(rng.normal(size=5))
    mimic = kd_instance_loss(teacher, T.constant(np.log(teacher))).item()
    entropy = -float(np.sum(teacher * np.log(teacher)))
    assert abs(mimic - entropy) <= 1e-9


def test_kd_instance_rejects_unnormalized_teacher():
    with pytest.raises(ValidationError):
        kd_instance_loss(np.array([0.6, 0.3]), T.constant([0.0, 0.0]))


def make_view_and_probes(j_total=4, hidden=3, n=6, classes=2, seed=0):
    """Teacher view with hand-set probe weights for oracle evaluation."""
    rng = np.random.default_rng(seed)
    examples = [TeacherExample(id=f"r{i}", label=int(i % classes),
                               layers=rng.normal(size=(j_total, hidden)).astype(np.float32))
                for i in range(n)]
    view = TeacherView(j_total, hidden, classes, examples)
    probes = ProbeSet(weights=[rng.normal(size=(hidden, classes)) for _ in range(j_total)],
                      biases=[rng.normal(size=classes) for _ in range(j_total)],
                      dev_accuracy=[0.0] * j_total, epochs=0)
    return view, probes


def test_attentive_weights_sum_to_one_and_positive():
    view, probes = make_view_and_probes()
    ids = view.ids
    labels = view.labels(ids)
    w = attentive_weights(view, probes, ids, k=3, labels=labels)
    np.testing.assert_allclose(w.sum(axis=0), np.ones(len(ids)), atol=1e-9)
    assert np.all(w > 0)


def test_attentive_weights_equal_when_probes_equally_confident():
    # identical layer states + identical probes -> identical confidences
    rng = np.random.default_rng(4)
    block = rng.normal(size=(1, 3)).astype(np.float32)
    examples = [TeacherExample(id=f"r{i}", label=i % 2,
                               layers=np.repeat(block, 4, axis=0))
                for i in range(4)]
    view = TeacherView(4, 3, 2, examples)
    w_mat = rng.normal(size=(3, 2))
    b_vec = rng.normal(size=2)
    probes = ProbeSet(weights=[w_mat.copy() for _ in range(4)],
                      biases=[b_vec.copy() for _ in range(4)],
                      dev_accuracy=[0.0] * 4, epochs=0)
    w = attentive_weights(view, probes, view.ids, k=4, labels=view.labels(view.ids))
    np.testing.assert_allclose(w, np.full((4, 4), 0.25), atol=1e-12)


def test_attentive_weights_order_follows_confidence():
    view, probes = make_view_and_probes(j_total=6, n=8, seed=5)
    ids = view.ids
    labels = view.labels(ids)
    k = 3
    w = attentive_weights(view, probes, ids, k, labels)
    for col, example_id in enumerate(ids):
        confs = []
        for i in range(1, k + 1):
            j = layer_map(i, k, view.num_layers)
            p = teacher_probe_probs(view, probes, [example_id], j)[0]
            confs.append(math.log(p[labels[col]]))
        order_conf = np.argsort(confs)
        order_weight = np.argsort(w[:, col])
        np.testing.assert_array_equal(order_conf, order_weight)


def test_attentive_two_layer_frozen_example():
    # teacher true-label log-probs (-0.1, -2.3) -> weights softmax(-0.1, -2.3)
    expected = naive_softmax([-0.1, -2.3])
    np.testing.assert_allclose(expected, [0.90024951, 0.09975049], atol=1e-8)
    probs = [math.exp(-0.1), math.exp(-2.3)]
    hidden = 2
    examples = [TeacherExample(id="r0", label=0,
                               layers=np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))]
    view = TeacherView(2, hidden, 2, examples)
    # probe j outputs exactly [p_j, 1 - p_j] for the single example
    weights, biases = [], []
    for j, p in enumerate(probs):
        w = np.zeros((hidden, 2))
        b = np.array([math.log(p), math.log(1.0 - p)])
        weights.append(w)
        biases.append(b)
    probes = ProbeSet(weights=weights, biases=biases, dev_accuracy=[0, 0], epochs=0)
    got = attentive_weights(view, probes, ["r0"], k=2, labels=np.array([0]))
    np.testing.assert_allclose(got[:, 0], expected, atol=1e-9)

    student = [T.constant(np.array([[0.4, -0.4]])), T.constant(np.array([[0.1, 0.2]]))]
    loss = attentive_kd_loss(view, probes, ["r0"], student,
                             k_sample=np.array([0.0, 1.0]), labels=np.array([0]))
    oracle = 0.0
    for i, (p, s) in enumerate(zip(probs, [[0.4, -0.4], [0.1, 0.2]])):
        oracle += expected[i] * naive_xent(s, [p, 1.0 - p])
    assert abs(loss.item() - oracle) < 1e-9


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def test_total_loss_boundaries_and_defaults():
    assert abs(total_loss(1.0, 5.0, 0.5, LossConfig(gamma=0.0, beta=4.0)).item()
               - (1.0 + 2.0)) < 1e-12
    assert abs(total_loss(1.0, 2.0, 9.0, LossConfig(gamma=1.0, beta=0.0)).item()
               - 2.0) < 1e-12
    cfg = LossConfig()
    assert cfg.gamma == 0.8 and cfg.beta == 4.0 and cfg.temperature == 1.0
    assert abs(total_loss(1.0, 2.0, 0.5, cfg).item() - 3.8) < 1e-12


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        LossConfig(beta=-1.0)
    with pytest.raises(ConfigError):
        LossConfig(temperature=0.0)


# ---------------------------------------------------------------------------
# analytic child accounting
# ---------------------------------------------------------------------------

def test_child_param_count_matches_per_weight_oracle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        topo = CellTopology(2)
        ops = {e: ALL_OPERATIONS[int(rng.integers(0, 10))] for e in topo.edges}
        child = ChildGraph(k=int(rng.integers(1, 4)), n_nodes=2, ops=ops, embed_dim=6)
        net = ChildNet(child, vocab_size=17, num_classes=3, seed=0)
        analytic = child_param_count(child, embed_dim=6, vocab_size=17, num_classes=3)
        assert analytic == net.param_count()


def test_cost_report_contains_reference_rows_and_child_totals():
    table = build_cost_table(6, 8)
    topo = CellTopology(1)
    child = ChildGraph(k=2, n_nodes=1,
                       ops={e: OperationKind.SKIP for e in topo.edges}, embed_dim=6)
    text = cost_report_text(table, child, vocab_size=17, num_classes=2)
    assert "SST-2" in text and "29.3x" in text and "9.5M" in text
    assert "cell operation parameters: 0" in text
    assert child_cell_flops(child, table) == 0
    assert child_op_param_count(child, 6) == 0
