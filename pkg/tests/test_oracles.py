import numpy as np
import pytest

from ddpnet import netgraph, oracles
from ddpnet.errors import InadmissiblePoint, PathLimitExceeded
from ddpnet.losses import LossSpec
from ddpnet.verify import random_instance


def test_fd_gradient_of_squared_norm():
    g = oracles.finite_difference_gradient(lambda w: float(w @ w), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-9)


def test_fd_second_difference_of_quadratic():
    d = oracles.finite_difference_diagonal_hessian(lambda w: float(w @ w) + w[0] * w[1], np.array([1.0, -2.0]))
    np.testing.assert_allclose(d, [2.0, 2.0], rtol=1e-7)


def test_single_edge_jacobian():
    t = netgraph.NetworkTopology([("x", "input"), ("y", "output")], [("x", "y")])
    np.testing.assert_array_equal(oracles.per_output_jacobian(t, [0.7], [3.0]), [[3.0]])


def test_single_edge_fisher():
    t = netgraph.NetworkTopology([("x", "input"), ("y", "output")], [("x", "y")])
    assert oracles.diagonal_fisher_gaussian(t, [2.0], netgraph.Batch([[1.0], [-1.0]]))[0] == 1.0


def test_dead_network_fisher_is_zero(chain):
    f = oracles.diagonal_fisher_gaussian(chain, [-1.0, 1.0], netgraph.Batch([[1.0], [2.0]]))
    np.testing.assert_array_equal(f, [0.0, 0.0])


def test_chain_path_kappa(chain):
    assert oracles.brute_force_path_kappa(chain, [2.0, 3.0], 0) == 9.0
    assert oracles.brute_force_path_kappa(chain, [2.0, 3.0], 1) == 4.0


def test_net2221_first_edge_path_kappa(net2221, rng):
    w = rng.uniform(0.5, 1.5, net2221.n_edges)
    e = net2221.edge_index("x0", "h1_0")
    want = sum(w[net2221.edge_index("h1_0", f"h2_{j}")] ** 2 * w[net2221.edge_index(f"h2_{j}", "y0")] ** 2
               for j in range(2))
    assert oracles.brute_force_path_kappa(net2221, w, e) == pytest.approx(want, rel=1e-14)


def test_path_limit(net2221):
    with pytest.raises(PathLimitExceeded):
        oracles.brute_force_path_kappa(net2221, np.ones(net2221.n_edges), 0, path_limit=3)


def test_guard_rejects_points_near_kinks(chain):
    batch = netgraph.Batch([[1.0]])
    with pytest.raises(InadmissiblePoint):
        oracles.finite_difference_gradient(lambda w: float(w @ w), np.array([1e-9, 1.0]),
                                           topology=chain, batch=batch)
    with pytest.raises(InadmissiblePoint):
        oracles.check_admissible(chain, [1e-9, 1.0], netgraph.Batch([[1.0], [1e6]]))


def test_first_order_taylor_remainder_shrinks_quadratically(rng):
    # independent of finite differences: the remainder of a linear model with
    # the analytic gradient must drop about 4x per halving of the step
    t, w, batch = oracles.sample_admissible(lambda r: random_instance(r, n=8), rng)
    loss = LossSpec()
    g = netgraph.loss_gradient(t, w, batch, loss)
    d = rng.standard_normal(w.size)
    f0 = netgraph.batch_loss(t, w, batch, loss)
    rem = [abs(netgraph.batch_loss(t, w + s * d, batch, loss) - f0 - s * g @ d) for s in (1e-3, 5e-4, 2.5e-4)]
    for a, b in zip(rem, rem[1:]):
        assert 3.0 < a / b < 5.0


def test_finite_diff_spec_validation():
    with pytest.raises(ValueError):
        oracles.FiniteDiffSpec(step=0.0)
    h = oracles.FiniteDiffSpec().steps(np.array([0.1, 10.0]))
    assert h[1] == pytest.approx(10.0 * h[0])
