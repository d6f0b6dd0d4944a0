import numpy as np
import pytest

from oracles import fd_relative_error, random_agent_observation
from unicorn_tsc.autodiff import Tensor, no_grad
from unicorn_tsc.autodiff import tensor as T
from unicorn_tsc.encode import pad_and_mask
from unicorn_tsc.unicornnet import (ModelConfig, ModelError, UnicornNet, elbo_loss,
                                    select_actions)

CFG = ModelConfig(M_max=12, P_max=4, catalog_size=4)


@pytest.fixture(scope="module")
def net():
    return UnicornNet(CFG, seed=0)


def batch(rng, n=3, m=None, p=None):
    obs = [random_agent_observation(rng, m or int(rng.integers(2, 13)), p or int(rng.integers(1, 5)))
           for _ in range(n)]
    return obs, pad_and_mask(obs, CFG.M_max, CFG.P_max)


def test_gfe_shapes_and_single_key(net):
    rng = np.random.default_rng(0)
    obs, enc = batch(rng, 2, m=8, p=3)
    with no_grad():
        h_sp, h = net.gfe_forward(enc, net.initial_hidden(2))
    assert h_sp.shape == (2, 4, 64) and h.shape == (2, 64)
    # one key: every real phase row is the same value projection
    assert np.allclose(h_sp.data[:, 0], h_sp.data[:, 2], atol=1e-12)
    assert (h_sp.data[:, 3] == 0).all()


def test_gfe_reacts_to_real_not_padded_state(net):
    rng = np.random.default_rng(1)
    obs, enc = batch(rng, 1, m=6, p=2)
    h0 = net.initial_hidden(1)
    with no_grad():
        base = net.gfe_forward(enc, h0)[0].data
        enc.S[0, 8:] = 5.0  # padded rows
        assert np.array_equal(base, net.gfe_forward(enc, h0)[0].data)
        enc.S[0, 1, 2] += 1.0
        assert not np.allclose(base, net.gfe_forward(enc, h0)[0].data)


def test_ise_determinism_and_reparameterisation():
    rng = np.random.default_rng(2)
    net = UnicornNet(CFG, seed=3)
    _, enc = batch(rng, 2)
    with no_grad():
        z1 = net.ise_forward(enc, rng=np.random.default_rng(9))[2].data
        z2 = net.ise_forward(enc, rng=np.random.default_rng(9))[2].data
    assert np.array_equal(z1, z2)
    net.encoder.fc2.W.data[...] = 0.0
    net.encoder.fc2.b.data[...] = 0.0
    eps = rng.normal(size=(2, 4, 16))
    with no_grad():
        mu, logvar, z, _ = net.ise_forward(enc, eps=eps)
    assert (mu.data == 0).all() and (logvar.data == 0).all()
    assert np.array_equal(z.data, eps)
    with pytest.raises(ModelError):
        net.ise_forward(enc)


def test_ise_pathwise_gradient():
    rng = np.random.default_rng(3)
    net = UnicornNet(CFG, seed=4)
    _, enc = batch(rng, 2)
    eps = rng.normal(size=(2, 4, 16))
    w = rng.normal(size=(2, 4, 96))
    f = lambda: (net.ise_forward(enc, eps=eps)[3] * w).sum()
    params = [net.encoder.fc1.W, net.encoder.fc2.W, net.encoder.fc2.b]
    assert fd_relative_error(f, params) < 1e-6
    from unicorn_tsc.autodiff import backward
    for p in params:
        p.grad = None
    backward(f())
    assert np.abs(net.encoder.fc2.W.grad).sum() > 0


def test_elbo_examples():
    assert float(elbo_loss(np.zeros(4), np.zeros(4), np.zeros(2), np.zeros(2)).data) == 0.0
    y = np.array([0.5, -1.0, 2.0])
    assert float(elbo_loss(y, y, np.zeros(2), np.zeros(2)).data) == 0.0
    kl = float(elbo_loss(np.zeros(3), np.zeros(3), np.array([1.0, 0.0]), np.zeros(2)).data)
    assert kl == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ModelError):
        elbo_loss(np.zeros(3), np.zeros(4), np.zeros(2), np.zeros(2))


def test_heads_single_phase_and_padded_rows(net):
    rng = np.random.default_rng(4)
    h_sp = rng.normal(size=(1, 4, 64))
    h_int = rng.normal(size=(1, 4, 16))
    U = rng.integers(0, 2, size=(1, 12)).astype(float)
    pm = np.array([[0.0, 1.0, 0.0, 0.0]])
    with no_grad():
        _, pol, _, val = net.heads_forward(Tensor(h_sp), Tensor(h_int), U, pm)
    assert pol.data.tolist() == [[0.0, 1.0, 0.0, 0.0]]
    assert np.isfinite(val.data).all()
    # padded rows never matter
    h_sp2, h_int2 = h_sp.copy(), h_int.copy()
    h_sp2[0, [0, 2, 3]] = rng.normal(size=(3, 64))
    h_int2[0, [0, 2, 3]] = h_int2[0, [3, 0, 2]]
    with no_grad():
        _, pol2, _, val2 = net.heads_forward(Tensor(h_sp2), Tensor(h_int2), U, pm)
    assert np.array_equal(pol.data, pol2.data)
    assert np.allclose(val.data, val2.data, atol=1e-12)
    with pytest.raises(ModelError):
        net.heads_forward(Tensor(h_sp), Tensor(h_int), U, np.zeros((1, 4)))


def test_policy_masked_and_normalised(net):
    rng = np.random.default_rng(5)
    obs, enc = batch(rng, 5)
    steps = net.act(enc, net.initial_hidden(5), rng, "sample")
    for o, s in zip(obs, steps):
        assert abs(s.policy.sum() - 1) < 1e-12
        assert (s.policy[o.true_P:] == 0).all()
        assert s.action < o.true_P
        assert s.log_prob == pytest.approx(np.log(s.policy[s.action]))
        assert s.h_sp.shape == (4, 64) and s.h_int.shape == (4, 16)
        assert s.next_state_preds.shape == (4, 96) and s.gru_hidden.shape == (64,)


def test_select_actions():
    pol = np.array([[0.2, 0.5, 0.3], [0.4, 0.4, 0.2]])
    assert select_actions(pol, np.random.default_rng(0), "greedy").tolist() == [1, 0]
    a = select_actions(np.tile([[0.1, 0.6, 0.3, 0.0]], (100_000, 1)), np.random.default_rng(1), "sample")
    freq = np.bincount(a, minlength=4) / len(a)
    for p, f in zip([0.1, 0.6, 0.3, 0.0], freq):
        sigma = np.sqrt(p * (1 - p) / len(a))
        assert abs(f - p) <= 3 * sigma + 1e-12
    r1 = select_actions(pol, np.random.default_rng(5), "sample")
    r2 = select_actions(pol, np.random.default_rng(5), "sample")
    assert np.array_equal(r1, r2)


def test_greedy_invariant_to_logit_temperature():
    rng = np.random.default_rng(6)
    net = UnicornNet(CFG, seed=7)
    _, enc = batch(rng, 6)
    h0 = net.initial_hidden(6)
    a = [s.action for s in net.act(enc, h0, np.random.default_rng(0), "greedy")]
    net.f_pi.W.data *= 3.7
    net.f_pi.b.data *= 3.7
    b = [s.action for s in net.act(enc, h0, np.random.default_rng(0), "greedy")]
    assert a == b


@pytest.mark.parametrize("seed", range(5))
def test_masking_invariance(net, seed):
    rng = np.random.default_rng(100 + seed)
    o = random_agent_observation(rng, int(rng.integers(2, 13)), int(rng.integers(1, 5)))
    M, P = o.true_M, o.true_P
    eps = rng.normal(size=(1, 4, 16))
    h0 = rng.normal(size=(1, 64)) * 0.3
    with no_grad():
        full = net.forward(pad_and_mask([o], 12, 4), h0, eps=eps)
        small = net.forward(pad_and_mask([o], M, P), h0, eps=eps[:, :P])
    assert np.allclose(full.policy.data[:, :P], small.policy.data, atol=1e-9, rtol=0)
    assert np.allclose(full.value.data, small.value.data, atol=1e-9, rtol=0)
    assert np.allclose(full.mu.data[:, :P], small.mu.data, atol=1e-9, rtol=0)
    assert np.allclose(full.preds.data[:, :P, :8 * M], small.preds.data, atol=1e-9, rtol=0)


def test_composed_forward_finite_differences_two_phase():
    rng = np.random.default_rng(8)
    net = UnicornNet(CFG, seed=9)
    o = random_agent_observation(rng, 6, 2)
    enc = pad_and_mask([o], 12, 4)
    eps = rng.normal(size=(1, 4, 16))
    h0 = rng.normal(size=(1, 64)) * 0.2

    def f():
        out = net.forward(enc, h0, eps=eps)
        return (out.log_policy * 0.5).sum() + out.value.sum() * 0.1 + T.square(out.preds).mean()

    assert fd_relative_error(f, list(net.parameters().values()), n_coords=4) < 1e-4


def test_checkpoint_roundtrip_and_manifest(tmp_path):
    net = UnicornNet(CFG, seed=1)
    path = tmp_path / "model.bin"
    net.save(path)
    back = UnicornNet.load(path)
    for (k, a), (k2, b) in zip(net.named_parameters(), back.named_parameters()):
        assert k == k2 and a.data.tobytes() == b.data.tobytes()
    back.require_compatible(12, 4, 4)
    with pytest.raises(ModelError, match="M_max=16"):
        back.require_compatible(16, 4, 4)


def test_observation_caps_exceeding_model():
    rng = np.random.default_rng(10)
    o = random_agent_observation(rng, 12, 4)
    net = UnicornNet(ModelConfig(M_max=12, P_max=4, catalog_size=4), seed=0)
    bigger = pad_and_mask([o], 16, 4)
    with pytest.raises(ModelError):
        net.forward(bigger, net.initial_hidden(1), rng=rng)
