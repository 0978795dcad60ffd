import numpy as np
import pytest
import torch

from event_vpr.errors import ClusterInitError, ParameterError, ShapeError
from event_vpr.vlad import NetVLAD, VladParams, aggregate, init_clusters, kmeans_objective, soft_assign
from helpers import fd_check

f64 = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64)


def vlad_loops(x, c, w, b):
    """Plain double loop over descriptors and clusters."""
    x, c, w, b = (np.asarray(v, dtype=np.float64) for v in (x, c, w, b))
    M, D = x.shape
    K = c.shape[0]
    V = np.zeros((K, D))
    for i in range(M):
        logits = [float(w[k] @ x[i] + b[k]) for k in range(K)]
        top = max(logits)
        e = [np.exp(v - top) for v in logits]
        s = sum(e)
        for k in range(K):
            V[k] += e[k] / s * (x[i] - c[k])
    for k in range(K):
        n = np.linalg.norm(V[k])
        if n > 1e-12:
            V[k] /= n
    flat = V.reshape(-1)
    n = np.linalg.norm(flat)
    return flat / n if n > 1e-12 else flat


def test_aggregate_matches_loops():
    for seed in range(5):
        x, c = rand(20, 6, seed=seed), rand(4, 6, seed=seed + 100)
        w, b = rand(4, 6, seed=seed + 200), rand(4, seed=seed + 300)
        got = aggregate(x, c, w, b).numpy()
        np.testing.assert_allclose(got, vlad_loops(x, c, w, b), rtol=0, atol=1e-12)


def test_batched_aggregate():
    x = rand(3, 10, 5)
    p = VladParams.from_centroids(rand(4, 5, seed=1), 2.0)
    out = aggregate(x, p.centroids, p.weight, p.bias)
    for i in range(3):
        torch.testing.assert_close(out[i], aggregate(x[i], p.centroids, p.weight, p.bias), rtol=0, atol=1e-14)


def test_single_cluster():
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], dtype=f64)
    c = torch.tensor([[1.0, 1.0]], dtype=f64)
    p = VladParams.from_centroids(c, 10.0)
    assert torch.equal(soft_assign(x, p.weight, p.bias), torch.ones(3, 1, dtype=f64))
    # residuals (0, -1), (-1, 0), (1, 1) cancel: the zero-degenerate case
    assert not aggregate(x, p.centroids, p.weight, p.bias).any()
    x[2] = torch.tensor([3.0, 2.0])
    torch.testing.assert_close(aggregate(x, p.centroids, p.weight, p.bias), torch.tensor([1.0, 0.0], dtype=f64))


def test_equidistant_tie_splits_half():
    c = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=f64)
    p = VladParams.from_centroids(c, 50.0)
    a = soft_assign(torch.tensor([[0.0, 3.0]], dtype=f64), p.weight, p.bias)
    assert a.tolist() == [[0.5, 0.5]]


def test_zero_input_is_degenerate_zero():
    c = torch.zeros(3, 4, dtype=f64)
    p = VladParams.from_centroids(c, 1.0)
    out = aggregate(torch.zeros(5, 4, dtype=f64), p.centroids, p.weight, p.bias)
    assert out.shape == (12,) and not out.abs().any() and torch.isfinite(out).all()


def test_empty_cluster_block_stays_zero():
    # a far centroid gets no mass; its block is zero and the rest is unit norm
    c = torch.tensor([[0.0, 0.0], [1e3, 1e3]], dtype=f64)
    p = VladParams.from_centroids(c, 10.0)
    out = aggregate(rand(8, 2), p.centroids, p.weight, p.bias)
    assert float(out[2:].abs().max()) < 1e-12
    assert abs(float(out.norm()) - 1) < 1e-12


def test_two_form_equivalence_at_init():
    for seed in range(4):
        alpha = [0.5, 5.0, 50.0, 100.0][seed]
        x = torch.nn.functional.normalize(rand(200, 16, seed=seed), dim=1)
        c = torch.nn.functional.normalize(rand(8, 16, seed=seed + 9), dim=1)
        p = VladParams.from_centroids(c, alpha)
        logit_form = soft_assign(x, p.weight, p.bias)
        d2 = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        dist_form = torch.softmax(-alpha * d2, dim=1)
        assert float((logit_form - dist_form).abs().max()) <= 1e-10


def test_rows_sum_to_one_and_unit_norm():
    x = rand(10_000, 8) * 3
    p = VladParams.from_centroids(rand(16, 8, seed=3), 1.0)
    a = soft_assign(x, p.weight, p.bias)
    assert float((a.sum(1) - 1).abs().max()) <= 1e-9
    out = aggregate(x.view(100, 100, 8), p.centroids, p.weight, p.bias)
    assert float((out.norm(dim=1) - 1).abs().max()) <= 1e-6


def test_descriptor_order_invariance_and_cluster_equivariance():
    x, c = rand(30, 5), rand(6, 5, seed=2)
    w, b = rand(6, 5, seed=3), rand(6, seed=4)
    base = aggregate(x, c, w, b)
    perm = torch.randperm(30, generator=torch.Generator().manual_seed(0))
    torch.testing.assert_close(aggregate(x[perm], c, w, b), base, rtol=0, atol=1e-14)
    kp = torch.tensor([3, 0, 5, 1, 4, 2])
    moved = aggregate(x, c[kp], w[kp], b[kp]).view(6, 5)
    torch.testing.assert_close(moved, base.view(6, 5)[kp], rtol=0, atol=1e-14)


@pytest.mark.parametrize("alpha", [0.0, -1.0])
def test_alpha_must_be_positive(alpha):
    with pytest.raises(ParameterError):
        VladParams.from_centroids(torch.zeros(2, 2), alpha)
    with pytest.raises(ParameterError):
        NetVLAD(2, 2, alpha=alpha)


def test_gradients():
    x, c = rand(12, 4), rand(3, 4, seed=1)
    w, b = rand(3, 4, seed=2), rand(3, seed=3)
    proj = rand(12, seed=5)
    assert fd_check(lambda ps: (soft_assign(ps[0], ps[1], ps[2]) * rand(12, 3, seed=6)).sum(),
                    [t.clone().requires_grad_() for t in (x, w, b)]) < 1e-3
    assert fd_check(lambda ps: (aggregate(*ps) * proj).sum(),
                    [t.clone().requires_grad_() for t in (x, c, w, b)]) < 1e-3


def test_netvlad_layer():
    layer = NetVLAD(4, 8, alpha=3.0).double()
    fmap = rand(2, 8, 3, 3)
    out = layer(fmap)
    assert out.shape == (2, 32) and layer.output_dim == 32
    x = torch.nn.functional.normalize(fmap.flatten(2).transpose(1, 2), dim=-1)
    torch.testing.assert_close(out, aggregate(x, layer.centroids, layer.weight, layer.bias))
    with pytest.raises(ShapeError):
        layer(rand(2, 7, 3, 3))
    with pytest.raises(ShapeError):
        layer.set_params(VladParams.from_centroids(rand(3, 8), 1.0))


# --- k-means initialisation --------------------------------------------------


def test_init_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    true = np.array([[0, 0], [10, 0], [0, 10]], dtype=float)
    samples = np.concatenate([t + 0.1 * rng.standard_normal((50, 2)) for t in true])
    p = init_clusters(samples, 3, alpha=7.0)
    got = p.centroids.numpy()[np.argsort(p.centroids.numpy() @ [1, 3])]
    means = np.stack([samples[i * 50:(i + 1) * 50].mean(0) for i in range(3)])
    np.testing.assert_allclose(got, means[np.argsort(means @ [1, 3])], atol=1e-9)
    torch.testing.assert_close(p.weight, 14.0 * p.centroids)
    torch.testing.assert_close(p.bias, -7.0 * (p.centroids ** 2).sum(1))
    # invariant to the order the samples come in
    q = init_clusters(samples[rng.permutation(150)], 3, alpha=7.0)
    assert abs(kmeans_objective(samples, q.centroids.numpy()) - kmeans_objective(samples, p.centroids.numpy())) < 1e-9


def test_init_beats_random_centres():
    samples = np.random.default_rng(1).standard_normal((400, 4))
    p = init_clusters(samples, 8, seed=0)
    obj = kmeans_objective(samples, p.centroids.numpy())
    for s in range(5):
        pick = np.random.default_rng(s).choice(400, 8, replace=False)
        assert obj < kmeans_objective(samples, samples[pick])


def test_init_needs_enough_distinct_samples():
    samples = np.array([[1.0, 2.0]] * 10 + [[0.0, 0.0]])
    with pytest.raises(ClusterInitError):
        init_clusters(samples, 3)
    with pytest.raises(ParameterError):
        init_clusters(samples, 2, alpha=0)
