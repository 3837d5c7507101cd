import numpy as np
import pytest

from conftest import central_difference, make_batch, rel_error
from eggimpute import model
from eggimpute import tensor as T
from eggimpute.tensor import Tensor


def small_params(ds, sampler="egg", prototypes=2, hidden=8, k=3, seed=0, blocks=1):
    cfg = model.ModelConfig(hidden=hidden, blocks=blocks, prototypes=prototypes,
                            embed_width=4, sampler=sampler, k=k)
    return model.ParameterSet(cfg, ds.schema, num_classes=2, seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        model.ModelConfig(sampler="nope").validate()
    with pytest.raises(ValueError):
        model.ModelConfig(blocks=0).validate()


def test_edge_probabilities_identical_rows():
    p = model.edge_probabilities(Tensor(np.ones((3, 4))))
    assert np.allclose(p.data, 1.0)


def test_edge_probabilities_hand_example():
    h = Tensor([[0.0, 0.0], [1.0, 0.0]])
    p = model.edge_probabilities(h)
    assert p.data[0, 1] == pytest.approx(np.exp(-1.0))
    assert p.data[0, 0] == 1.0


def test_edge_probabilities_monotone_in_distance(rng):
    h = Tensor(rng.normal(size=(6, 3)))
    d = T.pairwise_sq_dist(h).data
    p = model.edge_probabilities(h).data
    order_d = np.argsort(d.ravel())
    assert np.all(np.diff(p.ravel()[order_d]) <= 1e-15)


def test_log_edge_probabilities_gradient(rng):
    h_data = rng.normal(size=(5, 3))
    h = Tensor(h_data, requires_grad=True)
    w = rng.normal(size=(5, 5))
    T.reduce_sum(T.mul(model.log_edge_probabilities(h), Tensor(w))).backward()
    fd = central_difference(
        lambda x: float((model.log_edge_probabilities(Tensor(x)).data * w).sum()), h_data)
    assert rel_error(h.grad, fd) < 1e-5


def sample_many(sampler, n_samples=200, m=9, k=3, tau=0.3, seed=0):
    rng = np.random.default_rng(seed)
    gen = np.random.default_rng(99)
    log_p = Tensor(-gen.uniform(0, 4, size=(m, m)))
    log_p.data = np.minimum(log_p.data, log_p.data.T)
    np.fill_diagonal(log_p.data, 0.0)
    for _ in range(n_samples):
        if sampler == "egg":
            yield model.sample_adjacency_egg(log_p, tau, rng)
        else:
            yield model.sample_adjacency_kegg(log_p, tau, k, rng)


@pytest.mark.parametrize("sampler", ["egg", "kegg"])
def test_sampled_graphs_are_valid(sampler):
    m, k = 9, 3
    for s in sample_many(sampler, m=m, k=k):
        hard = s.hard
        assert np.array_equal(hard, hard.T)
        assert np.array_equal(np.diag(hard), np.ones(m))
        assert set(np.unique(hard)) <= {0.0, 1.0}
        assert np.array_equal(s.adjacency.data, hard)  # straight-through forward
        if sampler == "kegg":
            row_sums = hard.sum(axis=1)
            assert np.all(row_sums >= k + 1) and np.all(row_sums <= m)


def test_egg_edge_frequency_monotone_in_probability():
    """Closer pairs must be sampled as edges more often (frequency oracle)."""
    rng = np.random.default_rng(5)
    log_p = np.zeros((3, 3))
    log_p[0, 1] = log_p[1, 0] = -0.05   # near pair
    log_p[0, 2] = log_p[2, 0] = -4.0    # far pair
    log_p[1, 2] = log_p[2, 1] = -4.0
    t = Tensor(log_p)
    hits_near = hits_far = 0
    n = 400
    for _ in range(n):
        s = model.sample_adjacency_egg(t, 0.2, rng)
        hits_near += s.hard[0, 1]
        hits_far += s.hard[0, 2]
    assert hits_near / n > hits_far / n + 0.3


def test_egg_gradient_reaches_log_probs(rng):
    log_p = Tensor(rng.normal(-1.0, 0.3, size=(5, 5)), requires_grad=True)
    s = model.sample_adjacency_egg(log_p, 0.5, rng)
    T.reduce_sum(s.adjacency).backward()
    assert log_p.grad is not None
    assert np.any(log_p.grad != 0)


def test_kegg_selects_exactly_k_per_row(rng):
    log_p = Tensor(rng.normal(size=(8, 8)))
    s = model.sample_adjacency_kegg(log_p, 0.4, 3, rng)
    # relaxed support: exactly k off-diagonal candidates per row
    support = (s.relaxed.data > 0).sum(axis=1)
    assert np.all(support == 3)
    assert np.all(np.diag(s.relaxed.data) == 0)


def test_kegg_rejects_bad_k(rng):
    log_p = Tensor(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        model.sample_adjacency_kegg(log_p, 0.4, 4, rng)
    with pytest.raises(ValueError):
        model.sample_adjacency_kegg(log_p, 0.4, 0, rng)


@pytest.mark.parametrize("fn", [lambda t, r: model.sample_adjacency_egg(t, 0.0, r),
                                lambda t, r: model.sample_adjacency_kegg(t, -1.0, 2, r)],
                         ids=["egg", "kegg"])
def test_samplers_reject_nonpositive_temperature(fn, rng):
    with pytest.raises(ValueError):
        fn(Tensor(np.zeros((4, 4))), rng)


def test_sampler_determinism():
    log_p = Tensor(np.random.default_rng(0).normal(size=(6, 6)))
    a = model.sample_adjacency_egg(log_p, 0.3, np.random.default_rng(77)).hard
    b = model.sample_adjacency_egg(log_p, 0.3, np.random.default_rng(77)).hard
    assert np.array_equal(a, b)


def test_identity_sample():
    s = model.identity_sample(5)
    assert np.array_equal(s.hard, np.eye(5))
    assert np.array_equal(s.adjacency.data, np.eye(5))


def test_gcn_update_identity_adjacency_zero_weight(rng):
    """With A = I and W = 0 the update reduces to row layer norm of H."""
    h_data = rng.normal(size=(4, 6))
    h = Tensor(h_data)
    out = model.gcn_update(h, model.identity_sample(4), Tensor(np.zeros((6, 6))))
    expected = T.layer_norm_row(Tensor(h_data)).data
    assert np.allclose(out.data, expected)


def test_gcn_update_hand_normalization():
    """Two connected nodes: D^{-1/2} A D^{-1/2} has 1/2 everywhere."""
    h = Tensor([[2.0, 0.0], [0.0, 2.0]])
    adj = np.ones((2, 2))
    out_msg = (np.array([[0.5, 0.5], [0.5, 0.5]]) @ h.data) @ np.eye(2)
    out = model.gcn_update(h, model.constant_sample(adj), Tensor(np.eye(2)))
    expected = T.layer_norm_row(Tensor(out_msg + h.data)).data
    assert np.allclose(out.data, expected)


def test_gcn_update_rejects_invalid_adjacency():
    h = Tensor(np.zeros((3, 2)))
    w = Tensor(np.eye(2))
    asym = np.eye(3)
    asym[0, 1] = 1.0
    with pytest.raises(ValueError, match="symmetric"):
        model.gcn_update(h, model.constant_sample(asym), w)
    no_diag = np.zeros((3, 3))
    with pytest.raises(ValueError, match="diagonal"):
        model.gcn_update(h, model.constant_sample(no_diag), w)


def test_gcn_update_gradient_matches_finite_differences(rng):
    h_data = rng.normal(size=(4, 3))
    adj = np.minimum(np.eye(4) + (rng.random((4, 4)) > 0.5), 1.0)
    adj = np.minimum(adj + adj.T, 1.0)
    np.fill_diagonal(adj, 1.0)
    w_data = rng.normal(size=(3, 3)) * 0.3
    probe = rng.normal(size=(4, 3))

    h = Tensor(h_data, requires_grad=True)
    out = model.gcn_update(h, model.constant_sample(adj), Tensor(w_data))
    T.reduce_sum(T.mul(out, Tensor(probe))).backward()

    def f(x):
        o = model.gcn_update(Tensor(x), model.constant_sample(adj), Tensor(w_data))
        return float((o.data * probe).sum())

    fd = central_difference(f, h_data)
    assert rel_error(h.grad, fd) < 1e-4


@pytest.mark.parametrize("sampler", ["egg", "kegg", "identity"])
def test_forward_shapes(sampler, small_mixed_dataset, rng):
    ds = small_mixed_dataset
    params = small_params(ds, sampler=sampler)
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(10), init, 0.2, params)
    out = model.forward(batch, params, 0.3, "train", rng)
    assert out.h_out.shape == (10, 8)
    assert out.numeric_pred.shape == (10, 3)
    assert len(out.cat_logits) == 1 and out.cat_logits[0].shape == (10, 3)
    assert out.task_logits.shape == (10, 2)
    assert len(out.samples) == 1
    m = 10 + params.config.prototypes
    assert out.samples[0].hard.shape == (m, m)


def test_forward_rejects_bad_mode(small_mixed_dataset, rng):
    ds = small_mixed_dataset
    params = small_params(ds)
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(6), init, 0.2, params)
    with pytest.raises(ValueError):
        model.forward(batch, params, 0.3, "test", rng)


def test_forward_adjacency_override_is_deterministic(small_mixed_dataset):
    ds = small_mixed_dataset
    params = small_params(ds)
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(6), init, 0.2, params)
    m = 6 + params.config.prototypes
    adj = np.eye(m)
    outs = []
    for seed in (1, 2):
        out = model.forward(batch, params, 0.3, "eval", np.random.default_rng(seed),
                            adjacency_override=[adj])
        outs.append(out.numeric_pred.data.copy())
    assert np.array_equal(outs[0], outs[1])


def test_forward_multi_block_concatenates(small_mixed_dataset, rng):
    ds = small_mixed_dataset
    params = small_params(ds, blocks=2)
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(7), init, 0.2, params)
    out = model.forward(batch, params, 0.3, "train", rng)
    assert out.h_out.shape == (7, 16)
    assert len(out.samples) == 2


def test_prototypes_participate_in_graph(small_mixed_dataset):
    """With p prototypes the sampled graph has n + p nodes, and the output
    rows correspond to the data nodes only."""
    ds = small_mixed_dataset
    params = small_params(ds, prototypes=4)
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(5), init, 0.2, params)
    out = model.forward(batch, params, 0.3, "train", np.random.default_rng(0))
    assert out.samples[0].hard.shape == (9, 9)
    assert out.h_out.shape[0] == 5


def test_zero_prototypes_supported(small_mixed_dataset, rng):
    ds = small_mixed_dataset
    params = small_params(ds, prototypes=0)
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(5), init, 0.2, params)
    out = model.forward(batch, params, 0.3, "train", rng)
    assert out.samples[0].hard.shape == (5, 5)


def test_checkpoint_round_trip(tmp_path, small_mixed_dataset):
    ds = small_mixed_dataset
    params = small_params(ds, seed=3)
    # move batch-norm running stats off their init so they are exercised too
    init = np.ones((ds.n_rows, 4), dtype=np.int8)
    batch = make_batch(ds, np.arange(8), init, 0.2, params)
    model.forward(batch, params, 0.3, "train", np.random.default_rng(0))

    path = tmp_path / "ckpt.npz"
    model.save_checkpoint(path, params, extra={"epoch": 7})
    loaded, extra = model.load_checkpoint(path, ds.schema)
    assert extra == {"epoch": 7}
    for name, p in params.named_parameters().items():
        assert np.array_equal(p.data, loaded.named_parameters()[name].data)
    out_a = model.forward(batch, params, 0.3, "eval", np.random.default_rng(4))
    batch_b = make_batch(ds, np.arange(8), init, 0.2, loaded)
    out_b = model.forward(batch_b, loaded, 0.3, "eval", np.random.default_rng(4))
    assert np.array_equal(out_a.numeric_pred.data, out_b.numeric_pred.data)


def test_checkpoint_version_guard(tmp_path, small_mixed_dataset):
    ds = small_mixed_dataset
    params = small_params(ds)
    path = tmp_path / "ckpt.npz"
    model.save_checkpoint(path, params)
    import json
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["version"] = 999
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="version"):
        model.load_checkpoint(path, ds.schema)
