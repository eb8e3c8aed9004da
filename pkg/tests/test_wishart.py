import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from wishart_sde import ndcore as nd
from wishart_sde.errors import ContractError
from wishart_sde.kernels import RbfArdKernel
from wishart_sde.svgp import SvgpLayer, kl_full
from wishart_sde.wishart import WishartDiffusion, rank_projection_check, row_normalize

from helpers import central_difference, relative_error, tape_gradient


def make_wishart(D=3, rank=2, nu=2, M=4, variance=1.0, lambda_init=1e-3, seed=0,
                 use_lambda=True):
    rng = np.random.default_rng(seed)
    k = RbfArdKernel(D, variance=variance)
    flow = SvgpLayer(rng.standard_normal((M, D)), D, k, fixed_prior_covariance=True)
    return WishartDiffusion(flow, rank=rank, nu=nu, lambda_init=lambda_init, seed=seed,
                            use_lambda=use_lambda)


# ----------------------------------------------------------- row_normalize


def test_row_normalize_pythagorean():
    npt.assert_allclose(row_normalize([[3.0, 4.0]]).value, [[0.6, 0.8]], rtol=1e-15)


def test_row_normalize_idempotent(rng):
    L = row_normalize(rng.standard_normal((5, 3))).value
    npt.assert_allclose(row_normalize(L).value, L, atol=1e-15)


def test_row_normalize_unit_norms(rng):
    L = row_normalize(rng.standard_normal((7, 3))).value
    npt.assert_allclose(np.sum(L ** 2, axis=1), 1.0, atol=1e-12)


def test_row_normalize_zero_row_names_index():
    with pytest.raises(ContractError, match="row 1"):
        row_normalize([[1.0, 0.0], [0.0, 0.0]])


def test_row_normalize_gradient(rng):
    L = nd.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = rng.standard_normal((4, 3))
    fn = lambda: nd.sum(row_normalize(L) * w)
    g = tape_gradient(fn, [L])[L]
    assert relative_error(g, central_difference(lambda: fn().item(), L)) <= 1e-4


# ------------------------------------------------------------- structure


def test_shares_flow_kernel_and_inducing_inputs():
    rng = np.random.default_rng(0)
    k = RbfArdKernel(3)
    flow = SvgpLayer(rng.standard_normal((4, 3)), 3, k, fixed_prior_covariance=True)
    w = WishartDiffusion(flow, rank=2)
    assert w.J_layer.kernel is flow.kernel and w.J_layer.Z is flow.Z
    assert w.nu == 2 and w.J_layer.num_outputs == 4
    owned = {id(p) for p in w.own_parameters()}
    assert id(flow.Z) not in owned and id(k.raw_variance) not in owned


def test_rejects_bad_rank():
    with pytest.raises(ContractError):
        make_wishart(rank=0)


def test_lambda_switches():
    assert make_wishart(use_lambda=False).lambda_diag() is None
    w = make_wishart(lambda_init=0.2)
    npt.assert_allclose(w.lambda_diag().value, 0.2)
    assert w.lambda_raw in w.own_parameters()


# --------------------------------------------------------------- sampling


def test_zero_noise_zero_mean_gives_lambda(rng):
    w = make_wishart(lambda_init=0.3)
    X = rng.standard_normal((5, 3))
    factor, lam = w.sample_sqrt_sigma(X, np.zeros((5, 2, 2)))
    npt.assert_array_equal(factor.value, 0.0)
    npt.assert_allclose(w.sigma(X, np.zeros((5, 2, 2))).value, np.broadcast_to(0.3 * np.eye(3), (5, 3, 3)))


def test_sigma_matches_factor(rng):
    w = make_wishart(lambda_init=0.1)
    w.J_layer.q_mu.value = rng.standard_normal(w.J_layer.q_mu.shape)
    X, noise = rng.standard_normal((6, 3)), rng.standard_normal((6, 2, 2))
    factor, lam = w.sample_sqrt_sigma(X, noise)
    F = factor.value
    npt.assert_allclose(w.sigma(X, noise).value,
                        F @ np.swapaxes(F, 1, 2) + np.diag(lam.value), atol=1e-12)


def test_noise_shape_contract(rng):
    w = make_wishart()
    with pytest.raises(ContractError):
        w.sample_sqrt_sigma(rng.standard_normal((4, 3)), np.zeros((4, 2, 3)))


def test_factor_rank(rng):
    w = make_wishart(D=5, rank=2, nu=3, use_lambda=False)
    X = rng.standard_normal((10, 5))
    sig = w.sigma(X, rng.standard_normal((10, 2, 3))).value
    assert all(np.linalg.matrix_rank(s, tol=1e-10) <= 2 for s in sig)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 16), lam=st.booleans())
def test_sigma_symmetric_psd(seed, lam):
    rng = np.random.default_rng(seed)
    w = make_wishart(D=4, rank=3, nu=2, seed=seed, use_lambda=lam, lambda_init=0.05)
    w.J_layer.q_mu.value = rng.standard_normal(w.J_layer.q_mu.shape)
    sig = w.sigma(rng.standard_normal((8, 4)), rng.standard_normal((8, 3, 2))).value
    npt.assert_allclose(sig, np.swapaxes(sig, 1, 2), atol=1e-14)
    eig = np.linalg.eigvalsh(sig)
    assert eig.min() >= -1e-10
    if lam:
        assert eig.min() > 0


def prior_draws(w, n, rng):
    Z = w.J_layer.Z.value
    X = np.repeat(Z[:1], n, axis=0)
    return X, rng.standard_normal((n, w.rank, w.nu))


def test_prior_mean_of_sigma(rng):
    w = make_wishart(D=3, rank=2, nu=2, variance=1.0, lambda_init=0.05)
    X, noise = prior_draws(w, 20_000, rng)
    mean = w.sigma(X, noise).value.mean(0)
    L = w.L.value
    target = 1.0 * 2 * L @ L.T + np.diag(w.lambda_diag().value)
    scale = np.linalg.norm(target)
    assert np.linalg.norm(mean - target) / scale <= 0.05


def test_projection_moments(rng):
    w = make_wishart(D=3, rank=2, nu=2, variance=1.0, use_lambda=False)
    X, noise = prior_draws(w, 20_000, rng)
    R = np.array([[1.0, 0.0, 0.0]])
    proj = rank_projection_check(w, R, X, noise).value[:, 0, 0]
    LL = (w.L.value @ w.L.value.T)[0, 0]
    npt.assert_allclose(proj.mean(), 2 * LL, rtol=0.05)
    npt.assert_allclose(proj.var(), 2 * 2 * LL ** 2, rtol=0.10)


def test_projection_with_lambda_mean(rng):
    w = make_wishart(D=3, rank=2, nu=2, variance=1.0, lambda_init=0.2)
    X, noise = prior_draws(w, 20_000, rng)
    proj = rank_projection_check(w, [[1.0, 0.0, 0.0]], X, noise).value[:, 0, 0]
    LL = (w.L.value @ w.L.value.T)[0, 0]
    npt.assert_allclose(proj.mean(), 2 * LL + 0.2, rtol=0.05)


def test_projection_identity_returns_sigma(rng):
    w = make_wishart()
    X, noise = rng.standard_normal((3, 3)), rng.standard_normal((3, 2, 2))
    npt.assert_allclose(rank_projection_check(w, np.eye(3), X, noise).value,
                        w.sigma(X, noise).value, atol=1e-14)


def test_projection_contracts(rng):
    w = make_wishart()
    X, noise = rng.standard_normal((3, 3)), rng.standard_normal((3, 2, 2))
    with pytest.raises(ContractError):
        rank_projection_check(w, np.ones((2, 3)), X, noise)
    with pytest.raises(ContractError):
        rank_projection_check(w, np.eye(2), X, noise)


def test_kl_is_sum_of_entry_kls(rng):
    w = make_wishart(D=3, rank=2, nu=3, M=4)
    J = w.J_layer
    J.q_mu.value = rng.standard_normal(J.q_mu.shape)
    J.q_sqrt.value = np.tril(0.3 * rng.standard_normal(J.q_sqrt.shape)) + np.eye(4)
    total = 0.0
    for p in range(J.num_outputs):
        single = SvgpLayer(J.Z.value, 1, J.kernel, jitter=J.jitter)
        single.q_mu.value = J.q_mu.value[:, p:p + 1]
        single.q_sqrt.value = J.q_sqrt.value[p:p + 1]
        total += kl_full(single).item()
    npt.assert_allclose(w.kl().item(), total, atol=1e-10)


def test_kl_starts_at_zero():
    assert abs(make_wishart().kl().item()) <= 1e-10


def test_sample_gradients(rng):
    w = make_wishart(D=2, rank=2, nu=2, M=3, lambda_init=0.1)
    J = w.J_layer
    J.q_mu.value = rng.standard_normal(J.q_mu.shape)
    X, noise = rng.standard_normal((3, 2)), rng.standard_normal((3, 2, 2))
    probe = rng.standard_normal((3, 2, 2))
    fn = lambda: nd.sum(w.sigma(X, noise) * probe)
    params = w.own_parameters() + [J.Z] + J.kernel.parameters()
    grads = tape_gradient(fn, params)
    for p in params:
        fd = central_difference(lambda: fn().item(), p)
        if p is J.q_sqrt:
            fd = np.tril(fd)
        assert relative_error(grads[p], fd) <= 1e-4, p.name
