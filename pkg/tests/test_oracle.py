import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from primalfix import catalog
from primalfix.estimators import plug_in
from primalfix.graph import Admg, partition_mlx, primal_fixable, topological_order
from primalfix.nuisance import evaluate_nuisances, exact_config
from primalfix.oracle import (
    JointTable,
    OracleError,
    brute_force_psi,
    law_dataset,
    load_joint_table,
    random_fixable_admg,
    random_markov_law,
)


def _partition(g, a, y):
    return partition_mlx(g, topological_order(g, a, y), a, y)


def test_joint_table_rejects_bad_probabilities():
    with pytest.raises(OracleError, match="sum to 1"):
        JointTable(("A",), np.array([0.2, 0.2]))
    with pytest.raises(OracleError, match="one axis per vertex"):
        JointTable(("A", "B"), np.array([0.5, 0.5]))


def test_conditional_and_positivity():
    t = JointTable(("A", "Y"), np.array([[0.5, 0.0], [0.25, 0.25]]))
    assert t.conditional({"Y": 1}, {"A": 1}) == pytest.approx(0.5)
    z = JointTable(("A", "Y"), np.array([[0.5, 0.5], [0.0, 0.0]]))
    with pytest.raises(OracleError, match="positivity violation"):
        z.conditional({"Y": 1}, {"A": 1})


def test_back_door_brute_force_is_adjustment_formula():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(8)).reshape(2, 2, 2)
    t = JointTable(("X", "A", "Y"), probs)
    g = catalog.back_door()
    psi = brute_force_psi(t, _partition(g, "A", "Y"), a0=1)
    want = sum(t.marginal({"X": x}) * t.conditional({"Y": 1}, {"X": x, "A": 1}) for x in (0, 1))
    assert psi == pytest.approx(want, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_random_graphs_are_fixable_and_laws_are_exact(seed):
    rng = np.random.default_rng(seed)
    g, a, y = random_fixable_admg(rng)
    assert primal_fixable(g, a)
    t = random_markov_law(g, rng)
    n_hidden = len(g.bi_edges)
    assert t.counts.sum() == 3 ** (len(g.names) + n_hidden)
    ds = law_dataset(t)
    assert ds.n == t.counts.sum()
    np.testing.assert_allclose(ds.scalar(g.names[0]).mean(), t.marginal({g.names[0]: 1}), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), a0=st.sampled_from([0, 1]))
def test_exact_plug_in_matches_brute_force(seed, a0):
    rng = np.random.default_rng(seed)
    g, a, y = random_fixable_admg(rng)
    t = random_markov_law(g, rng)
    p = _partition(g, a, y)
    ds = law_dataset(t)
    q = evaluate_nuisances(ds, p, exact_config(), "dnorm", a0)
    assert plug_in(ds, p, q, a0).psi == pytest.approx(brute_force_psi(t, p, a0), abs=1e-10)


def test_markov_law_respects_missing_edge():
    rng = np.random.default_rng(3)
    g = Admg.build(["V0", "V1", "V2"], [("V0", "V1"), ("V1", "V2")])
    t = random_markov_law(g, rng)
    for v1 in (0, 1):
        p_v2 = [t.conditional({"V2": 1}, {"V0": v0, "V1": v1}) for v0 in (0, 1)]
        assert p_v2[0] == pytest.approx(p_v2[1], abs=1e-14)


def test_load_joint_table(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("A,Y,prob\n0,0,0.25\n0,1,0.25\n1,1,0.5\n")
    t = load_joint_table(path)
    assert t.names == ("A", "Y")
    assert t.marginal({"A": 1, "Y": 0}) == 0.0
    path.write_text("A,Y\n0,0\n")
    with pytest.raises(OracleError, match="'prob' column"):
        load_joint_table(path)
    path.write_text("A,prob\n0,0.5\n1,0.4\n")
    with pytest.raises(OracleError, match="sum to 1"):
        load_joint_table(path)
