import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panet.gradcheck import grad_check
from panet.sync_bn import (
    BNLayer,
    ShardedBatch,
    allreduce_moments,
    syncbn_backward,
    syncbn_forward,
)
from panet.tensor import ContractViolation, Tensor, mul


def whole_batch_bn(x, gamma, beta, eps=1e-5):
    """Single-device batch norm written directly from the definition."""
    mu = x.mean(axis=(0, 2, 3))
    var = ((x - mu[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    xhat = (x - mu[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], mu, var


def whole_batch_grads(x, gamma, g, eps=1e-5):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    gx = gamma[None, :, None, None] * inv / m * (m * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return gx, dgamma, dbeta


def partitions(total):
    return st.lists(st.integers(1, total), min_size=1, max_size=total).map(
        lambda cuts: sorted(set(c for c in cuts if c < total))
    ).map(lambda cuts: [b - a for a, b in zip([0] + cuts, cuts + [total])])


def run(x, sizes, gamma, beta, upstream):
    layer = BNLayer(x.shape[1])
    layer.gamma.data[:] = gamma
    layer.beta.data[:] = beta
    xt = Tensor(x.copy(), requires_grad=True)
    out = layer(xt, sizes)
    mul(out, Tensor(upstream)).sum().backward()
    return out.data, xt.grad, layer.gamma.grad, layer.beta.grad, layer.running_mean, layer.running_var


def test_moments_match_whole_batch_for_2_and_4_shards():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3, 4, 4)) * 2 + 1
    _, mu, var = whole_batch_bn(x, np.ones(3), np.zeros(3))
    for n in (1, 2, 4):
        m = allreduce_moments(ShardedBatch.even(Tensor(x), n))
        np.testing.assert_allclose(m.mu_B, mu, atol=1e-12)
        np.testing.assert_allclose(m.sigma2_B, var, atol=1e-12)
        assert m.count == 8 * 16
    uneven = allreduce_moments(ShardedBatch.split(Tensor(x), [1, 4, 3]))
    np.testing.assert_allclose(uneven.sigma2_B, var, atol=1e-12)


def test_constant_input_moments_and_output():
    x = np.full((4, 2, 3, 3), 3.5)
    m = allreduce_moments(ShardedBatch.even(Tensor(x), 2))
    np.testing.assert_array_equal(m.mu_B, [3.5, 3.5])
    np.testing.assert_array_equal(m.sigma2_B, [0.0, 0.0])
    out = BNLayer(2)(Tensor(x), [2, 2])
    np.testing.assert_array_equal(out.data, 0.0)


def test_affine_contract_on_standardised_input():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    layer = BNLayer(2)
    layer.gamma.data[:] = 2.0
    layer.beta.data[:] = 3.0
    np.testing.assert_allclose(layer(Tensor(x), [3, 3]).data, 2 * x + 3, atol=1e-4)


def test_forward_matches_oracle_and_normalises():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 3, 5, 5)) * 3 - 2
    gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    want, _, _ = whole_batch_bn(x, gamma, beta)
    layer = BNLayer(3)
    layer.gamma.data[:] = gamma
    layer.beta.data[:] = beta
    got = layer(Tensor(x), [2, 3, 3]).data
    np.testing.assert_allclose(got, want, atol=1e-10)
    xhat = (got - beta[None, :, None, None]) / gamma[None, :, None, None]
    np.testing.assert_allclose(xhat.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(xhat.var(axis=(0, 2, 3)), 1, atol=1e-5)


@given(partitions(8), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_shard_invariance_any_partition(sizes, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 3, 3, 3))
    gamma, beta, up = rng.uniform(0.5, 2, 3), rng.standard_normal(3), rng.standard_normal(x.shape)
    ref = run(x, [8], gamma, beta, up)
    got = run(x, sizes, gamma, beta, up)
    for a, b in zip(ref, got):
        np.testing.assert_allclose(a, b, atol=1e-6)
    gx, dg, db = whole_batch_grads(x, gamma, up)
    np.testing.assert_allclose(got[1], gx, atol=1e-9)
    np.testing.assert_allclose(got[2], dg, atol=1e-9)
    np.testing.assert_allclose(got[3], db, atol=1e-12)


def test_running_stats_update_with_momentum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)) + 5
    layer = BNLayer(2, momentum=0.1)
    layer(Tensor(x), [2, 2])
    _, mu, var = whole_batch_bn(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(layer.running_mean, 0.1 * mu, atol=1e-12)
    np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * var, atol=1e-12)
    assert np.all(layer.running_var >= 0)


def test_eval_mode_is_per_element_affine():
    rng = np.random.default_rng(4)
    layer = BNLayer(3)
    layer.running_mean = rng.standard_normal(3)
    layer.running_var = rng.uniform(0.5, 2, 3)
    layer.eval()
    x = rng.standard_normal((5, 3, 2, 2))
    perm = rng.permutation(5)
    a = layer(Tensor(x)).data
    b = layer(Tensor(x[perm])).data
    np.testing.assert_array_equal(a[perm], b)
    xt = Tensor(x, requires_grad=True)
    report = grad_check(lambda t, g, b: layer(t, [2, 3]), [xt, layer.gamma, layer.beta])
    assert report.passed, report.line()


def test_backward_gradcheck_4x3x5x5_two_shards():
    rng = np.random.default_rng(5)
    layer = BNLayer(3)
    layer.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    weights = Tensor(rng.standard_normal((4, 3, 5, 5)))
    x = Tensor(rng.standard_normal((4, 3, 5, 5)), requires_grad=True)
    report = grad_check(lambda t, g, b: mul(layer(t, [2, 2]), weights), [x, layer.gamma, layer.beta])
    assert report.passed, report.line()


def test_beta_gradient_is_channel_sum_of_upstream():
    rng = np.random.default_rng(6)
    x, up = rng.standard_normal((4, 2, 3, 3)), rng.standard_normal((4, 2, 3, 3))
    _, _, _, db, _, _ = run(x, [4], np.ones(2), np.zeros(2), up)
    np.testing.assert_array_equal(db, up.sum(axis=(0, 2, 3)))
    # sharded: same value, summed shard by shard
    _, _, _, db, _, _ = run(x, [1, 3], np.ones(2), np.zeros(2), up)
    np.testing.assert_allclose(db, up.sum(axis=(0, 2, 3)), rtol=1e-14)


def test_contract_violations():
    layer = BNLayer(3)
    with pytest.raises(ContractViolation):
        layer(Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ContractViolation):
        ShardedBatch([])
    with pytest.raises(ContractViolation):
        ShardedBatch.split(Tensor(np.zeros((4, 3, 2, 2))), [2, 1])
    with pytest.raises(ContractViolation):
        syncbn_backward([np.zeros((2, 3, 2, 2))], None)
    with pytest.raises(ContractViolation):
        syncbn_forward(ShardedBatch.even(Tensor(np.zeros((2, 3, 2, 2))), 2), layer, mode="test")


def test_bn_on_fc_activations():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 4))
    layer = BNLayer(4)
    out = layer(Tensor(x), [3, 3]).data
    want = (x - x.mean(0)) / np.sqrt(x.var(0) + 1e-5)
    np.testing.assert_allclose(out, want, atol=1e-12)
