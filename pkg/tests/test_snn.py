import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from turbidspike.snn import (
    LifConfig,
    LifState,
    SAEConfig,
    SpikingAutoencoder,
    accumulate_membrane,
    conv_out_size,
    conv_spike_layer,
    export_latent,
    lif_step,
    read_latent,
    sae_forward_step,
    spike,
    surrogate_grad,
    surrogate_sigma,
)

SMALL = SAEConfig(input_shape=(2, 16, 16), channels=(4, 8), latent_dim=12)


def lif_oracle(inputs, alpha, beta, theta, reset):
    """Scalar reference iteration in plain Python floats."""
    i = u = 0.0
    us, ss = [], []
    for x in inputs:
        i = alpha * i + x
        u = beta * u + i
        s = 1.0 if u >= theta else 0.0
        u = u - theta * s if reset == "subtract" else u * (1 - s)
        us.append(u)
        ss.append(s)
    return us, ss


def run_lif(inputs, cfg):
    state = LifState.zeros((1,), torch.float64)
    us, ss = [], []
    for x in inputs:
        state, s = lif_step(state, torch.tensor([x], dtype=torch.float64), cfg)
        us.append(float(state.u[0]))
        ss.append(float(s[0]))
    return us, ss


# ---------------------------------------------------------------- neurons

def test_lif_zero_stays_zero():
    state, s = lif_step(LifState.zeros((3, 3)), torch.zeros(3, 3), LifConfig())
    assert s.sum() == 0 and state.u.abs().sum() == 0 and state.i.abs().sum() == 0


def test_lif_constant_drive_example():
    us, ss = run_lif([0.3] * 5, LifConfig(alpha=0.0, beta=1.0, theta=1.0))
    assert ss[:4] == [0.0, 0.0, 0.0, 1.0]
    np.testing.assert_allclose(us[:4], [0.3, 0.6, 0.9, 0.2], atol=1e-12)


def test_lif_memoryless():
    cfg = LifConfig(alpha=0.0, beta=0.0, theta=0.5)
    x = torch.tensor([0.2, 0.5, 0.49, 3.0])
    _, s = lif_step(LifState.zeros((4,)), x, cfg)
    assert s.tolist() == [0.0, 1.0, 0.0, 1.0]


def test_lif_zero_reset():
    us, ss = run_lif([0.6, 0.6, 0.6], LifConfig(alpha=0.0, beta=1.0, theta=1.0, reset="zero"))
    assert ss == [0.0, 1.0, 0.0] and us == pytest.approx([0.6, 0.0, 0.6])


@given(
    st.lists(st.floats(-2.0, 2.0), min_size=1, max_size=30),
    st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.1, 3.0),
    st.sampled_from(["subtract", "zero"]),
)
def test_lif_matches_scalar_oracle(inputs, alpha, beta, theta, reset):
    cfg = LifConfig(alpha=alpha, beta=beta, theta=theta, reset=reset)
    us, ss = run_lif(inputs, cfg)
    ref_u, ref_s = lif_oracle(inputs, alpha, beta, theta, reset)
    assert ss == ref_s
    np.testing.assert_allclose(us, ref_u, atol=1e-9)


@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=40), st.floats(0.1, 2.0))
def test_subtract_reset_bounds_membrane(inputs, theta):
    # with alpha = 0 the per-step drive is the input itself
    us, _ = run_lif(inputs, LifConfig(alpha=0.0, beta=0.9, theta=theta))
    bound = theta + max(abs(x) for x in inputs)
    assert all(u < bound + 1e-12 for u in us)


def test_lif_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        lif_step(LifState.zeros((2,)), torch.tensor([0.0, math.nan]), LifConfig())


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(beta=-0.1), dict(theta=0), dict(reset="none")])
def test_lif_config_validation(kw):
    with pytest.raises(ValueError):
        LifConfig(**kw)


def test_surrogate_closed_forms():
    assert float(surrogate_sigma(1.0)) == 0.5
    assert float(surrogate_grad(1.0, k=2.0)) == 2.0
    u = torch.tensor([0.3, 1.7], dtype=torch.float64, requires_grad=True)
    spike(u, 1.0, 2.0).sum().backward()
    np.testing.assert_allclose(u.grad.numpy(), surrogate_grad(u.detach(), 1.0, 2.0).numpy())


# ----------------------------------------------------------------- conv

def test_conv_layer_zero_input():
    w = torch.randn(3, 2, 3, 3)
    out, st_ = conv_spike_layer(torch.zeros(1, 2, 8, 8), w, torch.zeros(3), LifState.zeros((1, 3, 8, 8)),
                                LifConfig(), padding=1)
    assert out.sum() == 0 and st_.u.abs().sum() == 0


def test_conv_layer_single_pixel_identity():
    cfg = LifConfig(theta=1.0)
    w = torch.full((1, 1, 1, 1), cfg.theta)
    x = torch.zeros(1, 1, 5, 5)
    x[0, 0, 2, 3] = 1
    out, _ = conv_spike_layer(x, w, None, LifState.zeros((1, 1, 5, 5)), cfg)
    assert out.sum() == 1 and out[0, 0, 2, 3] == 1


def test_conv_layer_shape_mismatch():
    with pytest.raises(ValueError):
        conv_spike_layer(torch.zeros(1, 2, 8, 8), torch.zeros(3, 2, 3, 3), None,
                         LifState.zeros((1, 3, 8, 8)), LifConfig(), stride=2, padding=1)


def test_default_shape_ladder():
    cfg = SAEConfig()
    assert [s[0] for s in cfg.spatial_sizes()] == [64, 32, 16, 8]
    assert cfg.pre_latent_shape == (128, 8, 8) and cfg.pre_latent_width == 8192
    assert conv_out_size(64, 3, 2, 1) == 32
    assert [s[0] for s in SAEConfig.for_input(32).spatial_sizes()] == [32, 16, 8]


def test_default_model_shapes():
    model = SpikingAutoencoder(SAEConfig())
    assert model.enc_fc.weight.shape == (128, 8192)
    assert model.dec_fc.weight.shape == (8192, 128)
    out = sae_forward_step(model, torch.zeros(1, 2, 64, 64), model.init_states(1))
    assert out.latent_spikes.shape == (1, 128)
    assert out.out_membrane.shape == (1, 2, 64, 64)
    assert out.latent_spikes.sum() == 0 and out.out_membrane.abs().sum() == 0


def test_zero_biases_at_init():
    model = SpikingAutoencoder(SMALL)
    assert all(float(p.detach().abs().sum()) == 0 for n, p in model.named_parameters() if n.endswith("bias"))


def test_sae_config_validation():
    with pytest.raises(ValueError):
        SAEConfig(input_shape=(3, 16, 16))
    with pytest.raises(ValueError):
        SAEConfig(channels=())
    with pytest.raises(ValueError):
        SAEConfig.for_input(48)
    assert SAEConfig.from_dict(SMALL.to_dict()) == SMALL


def random_input(seed, t=6, b=2, shape=(2, 16, 16), p=0.3):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand((t, b, *shape), generator=g) < p).float()


def test_block_equals_stepwise():
    model = SpikingAutoencoder(SMALL, generator=torch.Generator().manual_seed(0))
    x = random_input(1)
    lat, mem, spk, final = model(x)
    states = model.init_states(2)
    for t in range(x.shape[0]):
        out = model.step(x[t], states)
        states = out.states
        assert torch.equal(out.latent_spikes, lat[t])
        assert torch.equal(out.out_membrane, mem[t])
    # splitting the block and carrying state changes nothing
    a = model(x[:3])
    b = model(x[3:], a[3])
    assert torch.equal(torch.cat([a[1], b[1]]), mem)


def test_spikes_binary_and_deterministic():
    cfg = SAEConfig(input_shape=(2, 16, 16), channels=(4, 8), latent_dim=12, theta_out=0.5)
    model = SpikingAutoencoder(cfg, generator=torch.Generator().manual_seed(3))
    x = random_input(4, p=0.6)
    lat, mem, spk, states = model(x)
    for s in (lat, spk):
        assert set(torch.unique(s).tolist()) <= {0.0, 1.0}
    assert lat.sum() > 0
    again = model(x)
    assert torch.equal(again[1], mem) and torch.equal(again[2], spk)


def test_seeded_init_reproducible():
    a = SpikingAutoencoder(SMALL, generator=torch.Generator().manual_seed(5))
    b = SpikingAutoencoder(SMALL, generator=torch.Generator().manual_seed(5))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


# ---------------------------------------------------------- accumulation

def test_accumulate_zero():
    assert torch.count_nonzero(accumulate_membrane(torch.zeros(4, 2, 5, 5))) == 0


def test_accumulate_single_pixel():
    tr = torch.zeros(4, 2, 5, 5)
    tr[:, 0, 1, 2] = 0.7
    tr[:, 1] = 9.0  # negative channel is ignored
    img = accumulate_membrane(tr)
    assert img[1, 2] == 1 and img.sum() == 1


@given(st.floats(1e-3, 1e3))
def test_accumulate_scale_invariant(c):
    tr = torch.as_tensor(np.random.default_rng(0).normal(size=(5, 3, 2, 6, 6)))
    np.testing.assert_allclose(accumulate_membrane(tr * c).numpy(), accumulate_membrane(tr).numpy(), atol=1e-12)


def test_accumulate_rejects_empty():
    with pytest.raises(ValueError):
        accumulate_membrane(torch.zeros(0, 2, 3, 3))


# ---------------------------------------------------------------- latent

def test_latent_csv_roundtrip(tmp_path):
    lat = (np.random.default_rng(1).random((10, 128)) < 0.2).astype(np.int64)
    export_latent(lat, tmp_path / "lat.csv")
    header = (tmp_path / "lat.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "neuron_0" and header[-1] == "neuron_127"
    assert np.array_equal(read_latent(tmp_path / "lat.csv"), lat)


def test_latent_zero_table(tmp_path):
    model = SpikingAutoencoder(SAEConfig())
    lat, *_ = model(torch.zeros(10, 1, 2, 64, 64))
    export_latent(lat[:, 0], tmp_path / "z.csv")
    table = read_latent(tmp_path / "z.csv")
    assert table.shape == (10, 128) and table.sum() == 0
