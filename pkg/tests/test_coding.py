import numpy as np
import pytest

from conftest import random_instance
from spikedict.coding import (PerturbationTooLarge, perturbation_smallness, sparse_code, support,
                              verify_perturbation)
from spikedict.engine import kkt_residuals
from spikedict.model import RunConfig, weights_from_dictionary
from spikedict.oracle import LassoProblem, solve_nn_lasso

CFG = RunConfig(lambda1=0.1)


def oracle_code(D, x, lam=0.1, s=1.0):
    return solve_nn_lasso(LassoProblem(D, x, lam, s), 1e-10, max_iter=100_000)[0]


def test_identity_dictionary_code():
    w = weights_from_dictionary(np.eye(2), 0.5)
    a, _ = sparse_code(w, np.array([1.0, 0.1]), T=200)
    np.testing.assert_allclose(a, [0.5, 0.0], atol=0.01)


def test_zero_input_zero_code(instance):
    D, _ = instance
    a, _ = sparse_code(weights_from_dictionary(D, 0.1), np.zeros(D.shape[0]))
    assert not a.any()


@pytest.mark.parametrize("seed", range(5))
def test_code_matches_oracle(seed):
    D, x = random_instance(seed)
    a, _ = sparse_code(weights_from_dictionary(D, 0.1), x, T=200)
    assert np.abs(a - oracle_code(D, x)).max() <= 0.05


@pytest.mark.parametrize("seed", range(5))
def test_gamma_invariance(seed):
    D, x = random_instance(seed)
    w = weights_from_dictionary(D, 0.1)
    a0, _ = sparse_code(w, x, T=200)
    ak, _ = sparse_code(w, x, T=200, gamma=0.7)
    assert support(a0, 200).tolist() == support(ak, 200).tolist()
    assert np.abs(a0 - ak).max() <= 2 * (1 / 200) * 5


def test_complementarity_shrinks_with_T(instance):
    D, x = instance
    w = weights_from_dictionary(D, 0.1)
    comps = []
    for T in (50, 100, 200):
        _, snap = sparse_code(w, x, T=T)
        comps.append(kkt_residuals(snap, w, x)[1])
    assert comps[2] < comps[0]
    # roughly O(1/T): quadrupling T buys at least a factor 2
    assert comps[2] <= comps[0] / 2


def test_support_threshold():
    assert support(np.array([0.0, 0.0074, 0.0076, 0.3]), 200).tolist() == [2, 3]


def test_unperturbed_reduces_to_sparse_code(instance):
    D, x = instance
    rep = verify_perturbation(D, np.zeros((32, 32)), 0.0, x, CFG)
    assert rep.gap <= 0.05 + 1e-10
    assert rep.s_shift == 0.0 and rep.s_condition


def test_unperturbed_gamma_matches_gamma_zero(instance):
    D, x = instance
    r0 = verify_perturbation(D, np.zeros((32, 32)), 0.0, x, CFG)
    rk = verify_perturbation(D, np.zeros((32, 32)), 0.7, x, CFG)
    assert np.abs(r0.a_net - rk.a_net).max() <= 0.05


@pytest.mark.parametrize("seed", range(3))
def test_random_perturbation(seed):
    D, x = random_instance(seed)
    rng = np.random.default_rng(100 + seed)
    a_ref = oracle_code(D, x)
    dH = rng.standard_normal((32, 32))
    dH *= 0.1 * 1.0 / (4 * a_ref.max()) / np.abs(dH).sum()
    for gamma in (0.0, 0.7):
        rep = verify_perturbation(D, dH, gamma, x, CFG)
        assert rep.gap <= 0.05
        assert rep.s_condition


def test_large_perturbation_rejected(instance):
    D, x = instance
    with pytest.raises(PerturbationTooLarge, match="perturbation too large"):
        verify_perturbation(D, np.full((32, 32), 0.5), 0.0, x, CFG)


def test_perturbation_smallness_formula():
    dH = np.array([[0.0, -0.1], [0.2, 0.0]])
    assert perturbation_smallness(dH, np.array([0.5, 0.25])) == pytest.approx(4 * 0.3 * 0.5)
