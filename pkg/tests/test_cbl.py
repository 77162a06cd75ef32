import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusion import autograd as ag
from fusion.cbl import (
    BisimConfig, PairBatch, bisim_loss, bisim_target, cbl_step, encoder_update, latent_bisim_loss,
    latent_gaussian, make_pairs, pairs_from_batch, w2_gaussian,
)
from fusion.dataset import FACTORS, DatasetError, OfflineDataset
from fusion.env import FACTOR_DIMS
from fusion.model import CausalTransformer, ModelConfig
from fusion.optim import OptimState
from fusion.trainer import smoothed

SMALL = ModelConfig(embed_dim=16, n_layers=1, n_heads=2, context_len=4, dropout=0.0)


def random_states(rng, n, shift=0.0):
    return {f: rng.normal(shift, 1.0, size=(n, FACTOR_DIMS[f])) for f in FACTORS}


def random_pair(rng, n=16, d=8):
    s = random_states(rng, n)
    a = rng.normal(size=(n, 2))
    r, c = rng.normal(size=n), rng.exponential(size=n)
    mu, sigma = rng.normal(size=(n, d)), rng.exponential(size=(n, d))
    return make_pairs(s, a, r, c, mu, sigma, rng)


# -- w2 -----------------------------------------------------------------------


def test_w2_identical_is_zero():
    mu, sig = np.array([1.0, -2.0]), np.array([0.5, 2.0])
    assert w2_gaussian(mu, sig, mu, sig) == 0.0


def test_w2_mean_shift():
    assert w2_gaussian([0.0], [1.3], [3.0], [1.3]) == pytest.approx(3.0)


def test_w2_rejects_negative_sigma():
    with pytest.raises(ValueError):
        w2_gaussian([0.0], [-1.0], [0.0], [1.0])


def test_w2_matches_coupled_monte_carlo():
    rng = np.random.default_rng(5)
    mu1, mu2 = rng.normal(size=4), rng.normal(size=4)
    s1, s2 = rng.exponential(size=4), rng.exponential(size=4)
    eps = rng.standard_normal((100_000, 4))
    est = np.sqrt(np.mean(np.sum((mu1 + s1 * eps - mu2 - s2 * eps) ** 2, axis=1)))
    assert abs(w2_gaussian(mu1, s1, mu2, s2) - est) / est < 0.02


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(0, 3), min_size=3, max_size=3))
def test_w2_symmetric_and_nonnegative(mu, sig):
    mu, sig = np.array(mu), np.array(sig)
    a = w2_gaussian(mu, sig, -mu, sig[::-1])
    assert a >= 0 and a == w2_gaussian(-mu, sig[::-1], mu, sig)


# -- config and targets ---------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        BisimConfig(lam=-1.0)
    with pytest.raises(ValueError):
        BisimConfig(gamma=1.0)


def _pair_from_scalars(r1, r2, c1, c2, mu1, mu2):
    s = {f: np.zeros((1, FACTOR_DIMS[f])) for f in FACTORS}
    a = np.zeros((1, 2))
    one = lambda v: np.array([v], dtype=float)
    mu1, mu2 = np.atleast_2d(mu1).astype(float), np.atleast_2d(mu2).astype(float)
    return PairBatch(s, a, one(r1), one(c1), mu1, np.ones_like(mu1), s, a, one(r2), one(c2), mu2, np.ones_like(mu2), np.arange(1))


def test_target_reflexive():
    p = _pair_from_scalars(0.3, 0.3, 1.0, 1.0, [1.0, 2.0], [1.0, 2.0])
    assert bisim_target(p)[0] == 0.0


def test_target_arithmetic():
    p = _pair_from_scalars(2.0, 1.0, 0.0, 0.5, [0.0], [0.0])
    assert bisim_target(p, BisimConfig(lam=1.0))[0] == pytest.approx(1.5)


def test_target_symmetric_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    p = random_pair(rng, n=1000)
    d = bisim_target(p)
    assert (d >= 0).all()
    # row i of the swapped batch holds the same two states in the other order
    assert np.max(np.abs(d - bisim_target(p.swapped()))) == 0.0


def test_duplicated_halves_give_zero_self_targets():
    rng = np.random.default_rng(3)
    n = 8
    s = random_states(rng, n)
    a, r, c = rng.normal(size=(n, 2)), rng.normal(size=n), rng.exponential(size=n)
    mu, sig = rng.normal(size=(n, 4)), rng.exponential(size=(n, 4))
    dup = lambda x: np.concatenate([x, x])
    p = make_pairs({k: dup(v) for k, v in s.items()}, dup(a), dup(r), dup(c), dup(mu), dup(sig), rng)
    d = bisim_target(p)
    same = np.array([p.perm[i] % n == i % n for i in range(2 * n)])
    assert same.any()  # the identity and the mirrored copy are both self-pairs
    assert (d[same] == 0.0).all()


def test_permutation_is_a_shuffle_of_the_batch():
    p = random_pair(np.random.default_rng(1), n=32)
    assert sorted(p.perm.tolist()) == list(range(32))
    np.testing.assert_array_equal(p.r2, p.r1[p.perm])


# -- loss ---------------------------------------------------------------------


def test_loss_examples():
    z = ag.Tensor(np.array([[1.0, -1.0]]))
    assert latent_bisim_loss(z, z, np.zeros(1)).item() == 0.0
    assert latent_bisim_loss(ag.Tensor(np.array([[2.0]])), ag.Tensor(np.array([[0.0]])), np.ones(1)).item() == 1.0


def test_stop_gradient_on_second_argument():
    rng = np.random.default_rng(0)
    w1 = ag.parameter(rng.normal(size=(3, 4)))
    w2 = ag.parameter(rng.normal(size=(3, 4)))
    x = ag.Tensor(rng.normal(size=(5, 3)))
    loss = latent_bisim_loss((x @ w1).tanh(), (x @ w2).tanh(), rng.exponential(size=5))
    loss.backward()
    assert np.abs(w1.grad).sum() > 0
    assert w2.grad is None or np.all(w2.grad == 0.0)


def test_bisim_loss_gradient_is_the_semi_gradient():
    # finite differences must hold phi(s2) fixed: it is the stop-gradient side
    rng = np.random.default_rng(4)
    model = CausalTransformer(SMALL, seed=0)
    p = random_pair(rng, n=6, d=SMALL.embed_dim)
    target = bisim_target(p)
    z2 = ag.Tensor(model.encode(p.s2).data)
    params = [model.params["enc.fuse.W"], model.params["enc.ego.b"]]
    model.zero_grad()
    bisim_loss(model, p, target).backward()
    analytic = [q.grad.copy() for q in params]
    frozen = lambda: latent_bisim_loss(model.encode(p.s1), z2, target)
    for q, g in zip(params, analytic):
        n = ag.numeric_grad(frozen, q)
        assert np.max(np.abs(g - n) / np.maximum(np.maximum(np.abs(g), np.abs(n)), 1e-6)) < 1e-4


def test_latent_gaussian_matches_finite_difference_jacobian():
    rng = np.random.default_rng(2)
    model = CausalTransformer(SMALL, seed=3)
    mu = random_states(rng, 3)
    sig = {f: rng.exponential(0.3, size=(3, FACTOR_DIMS[f])) for f in FACTORS}
    mz, sz = latent_gaussian(model, mu, sig)
    np.testing.assert_allclose(mz, model.encode(mu).data, atol=1e-12)
    var = np.zeros_like(mz)
    h = 1e-6
    for f in FACTORS:
        for j in range(FACTOR_DIMS[f]):
            up = {k: v.copy() for k, v in mu.items()}
            dn = {k: v.copy() for k, v in mu.items()}
            up[f][:, j] += h
            dn[f][:, j] -= h
            col = (model.encode(up).data - model.encode(dn).data) / (2 * h)
            var += (col * sig[f][:, j:j + 1]) ** 2
    np.testing.assert_allclose(sz, np.sqrt(var), rtol=1e-6, atol=1e-9)


# -- updates ------------------------------------------------------------------


def test_pairs_from_batch_without_dynamics_uses_observed_next_state(small_dataset):
    model = CausalTransformer(SMALL, seed=0)
    b = small_dataset.sample_windows(5, 4, np.random.default_rng(0))
    p = pairs_from_batch(model, b, None, np.random.default_rng(1))
    nxt = {f: b.next_obs[f][:, -1] for f in FACTORS}
    np.testing.assert_allclose(p.mu1, model.encode(nxt).data)
    assert (p.sigma1 == 0).all()


def test_zero_lr_cbl_step_leaves_encoder_unchanged(small_dataset):
    model = CausalTransformer(SMALL, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    cbl_step(small_dataset, model, BisimConfig(), OptimState(lr=0.0), np.random.default_rng(0), batch_size=8)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_cbl_step_touches_only_the_encoder(small_dataset):
    model = CausalTransformer(SMALL, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    cbl_step(small_dataset, model, BisimConfig(), OptimState(lr=1e-2), np.random.default_rng(0), batch_size=8)
    changed = {k for k, v in model.params.items() if not np.array_equal(v.data, before[k])}
    assert changed and all(k.startswith("enc.") for k in changed)


def test_cbl_step_rejects_empty_dataset():
    with pytest.raises(DatasetError):
        cbl_step(OfflineDataset([]), CausalTransformer(SMALL), BisimConfig(), OptimState(), np.random.default_rng(0))


def _train_on_fixed_batch(model, s, r, c, steps, lr, seed=0, fixed_pairing=False):
    """Encoder-only CBL on one fixed batch; next state equals the current one."""
    rng = np.random.default_rng(seed)
    state = OptimState(lr=lr)
    n = len(r)
    zero = {f: np.zeros_like(v) for f, v in s.items()}
    losses = []
    for _ in range(steps):
        mu, sig = latent_gaussian(model, s, zero)
        p = make_pairs(s, np.zeros((n, 2)), r, c, mu, sig, np.random.default_rng(seed) if fixed_pairing else rng)
        loss = bisim_loss(model, p, bisim_target(p))
        encoder_update(model, loss, state)
        losses.append(loss.item())
    return np.array(losses)


def test_fixed_batch_loss_decreases_after_smoothing():
    rng = np.random.default_rng(0)
    n = 32
    s = random_states(rng, n)
    r, c = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    losses = _train_on_fixed_batch(CausalTransformer(SMALL, seed=0), s, r, c, 500, 3e-4, fixed_pairing=True)
    sm = smoothed(losses, 50)[49:]
    assert np.all(np.diff(sm) < 0)
    assert sm[-1] < 0.5 * sm[0]


def test_separates_reward_cost_distinct_clusters():
    rng = np.random.default_rng(1)
    n = 20
    # the clusters share an observation distribution except for one feature
    a, b = random_states(rng, n), random_states(rng, n)
    b["ego"][:, 0] += 0.5
    s = {f: np.concatenate([a[f], b[f]]) for f in FACTORS}
    r = np.concatenate([np.zeros(n), np.ones(n)])
    c = np.concatenate([np.zeros(n), np.full(n, 2.0)])
    model = CausalTransformer(SMALL, seed=0)
    _train_on_fixed_batch(model, s, r, c, 400, 3e-3)
    z = model.encode(s).data
    dist = np.abs(z[:, None] - z[None]).sum(-1)
    intra = (dist[:n, :n].sum() + dist[n:, n:].sum()) / (2 * n * (n - 1))
    inter = dist[:n, n:].mean()
    assert inter > intra


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_target_pseudometric_properties(seed):
    p = random_pair(np.random.default_rng(seed), n=12)
    d = bisim_target(p, BisimConfig(lam=0.7, gamma=0.5))
    assert (d >= 0).all()
    assert np.array_equal(d, bisim_target(p.swapped(), BisimConfig(lam=0.7, gamma=0.5)))
