import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize, stats

from turbidspike.rng import PhotonStreams
from turbidspike.scatter import (
    DetectorSpec,
    IntensityFrame,
    PhantomSpec,
    SceneSpec,
    SourceSpec,
    TargetFrame,
    frame_schedule,
    mfp_count,
    propagate_photon,
    read_frames,
    run_photons,
    sample_hg,
    sample_step,
    scene_triggers,
    simulate_frames,
    write_frames,
)

PENCIL = SceneSpec(source=SourceSpec(profile="pencil"), detector=DetectorSpec((16, 16), 0.5))


def uniforms(n, seed=0):
    u = PhotonStreams(seed).block(np.arange(n), np.zeros(n, np.uint64))
    return u[:, 0]


def hg_cdf(mu, g):
    """P(cos theta <= mu) for the Henyey-Greenstein phase function."""
    return (1 - g * g) / (2 * g) * ((1 + g * g - 2 * g * mu) ** -0.5 - 1 / (1 + g))


# ------------------------------------------------------------------ specs

def test_mfp_count_reflection():
    assert mfp_count(PhantomSpec(mu_s=6, thickness=5), "reflection") == 60


def test_mfp_count_transmission():
    assert mfp_count(PhantomSpec(mu_s=6, thickness=12), "transmission") == 72


def test_mfp_count_clear():
    assert mfp_count(PhantomSpec(mu_s=0, thickness=7), "transmission") == 0


@pytest.mark.parametrize("kw", [dict(mu_s=-1), dict(mu_a=-0.1), dict(g=1.0), dict(g=-1.0), dict(thickness=-1)])
def test_phantom_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def test_source_and_scene_validation():
    with pytest.raises(ValueError):
        SourceSpec(beam_radius=0)
    with pytest.raises(ValueError):
        SceneSpec(geometry="sideways")
    with pytest.raises(ValueError):
        SceneSpec(detector=DetectorSpec((4, 4)), target_frames=(TargetFrame(np.ones((3, 3)), 0, 10),))


def test_detector_pixel_index():
    det = DetectorSpec((4, 4), 1.0)
    idx = det.pixel_index(np.array([-2.0, 1.99, 2.0, 0.5]), np.array([-2.0, 1.99, 0.0, -0.5]))
    assert idx.tolist() == [0, 15, -1, 1 * 4 + 2]


# --------------------------------------------------------------- sampling

def test_sample_step_examples():
    assert sample_step(math.exp(-1), 1.0) == pytest.approx(1.0, abs=1e-15)
    assert sample_step(1.0, 3.0) == 0.0


def test_sample_step_rejects_zero():
    with pytest.raises(ValueError):
        sample_step(0.0, 1.0)


def test_sample_step_mean():
    n = 1_000_000
    s = sample_step(uniforms(n), 6.0)
    assert abs(s.mean() - 1 / 6) < 3 * s.std(ddof=1) / math.sqrt(n)


def test_hg_isotropic_midpoint():
    assert sample_hg(0.0, 0.5) == 0.0


@pytest.mark.parametrize("g,u", [(0.9, 0.5), (0.5, 0.1), (-0.3, 0.8), (0.99, 0.999), (0.9, 0.02)])
def test_hg_matches_cdf_inversion(g, u):
    # independent oracle: root-find the analytic CDF
    mu = optimize.brentq(lambda m: hg_cdf(m, g) - u, -1.0, 1.0, xtol=1e-15)
    assert sample_hg(g, u) == pytest.approx(mu, abs=1e-12)


def test_hg_forward_peak_value():
    # (1 + g^2 - ((1 - g^2) / (1 - g + 2 g u))^2) / (2 g) at g=0.9, u=0.5
    assert sample_hg(0.9, 0.5) == pytest.approx(0.9855, abs=1e-12)


@pytest.mark.parametrize("g", [0.0, 0.5, 0.9])
def test_hg_mean_cosine(g):
    cos = sample_hg(g, uniforms(1_000_000, seed=11))
    assert abs(cos.mean() - g) <= 0.005


def test_hg_isotropic_is_uniform():
    cos = sample_hg(0.0, uniforms(100_000, seed=3))
    assert stats.kstest(cos, "uniform", args=(-1, 2)).pvalue > 0.01


@given(st.floats(-0.99, 0.99), st.floats(1e-12, 1.0))
def test_hg_in_range(g, u):
    assert -1.0 <= sample_hg(g, u) <= 1.0


# ---------------------------------------------------------------- photons

def test_zero_thickness_photon():
    ex = propagate_photon(PhantomSpec(thickness=0.0), PENCIL, seed=1)
    assert ex.position == (0.0, 0.0, 0.0)
    assert ex.path_length == 0.0 and ex.weight == 1.0 and ex.fate == "rear"


def test_beer_lambert_weight():
    ph = PhantomSpec(mu_s=0.0, mu_a=0.3, thickness=2.5)
    b = run_photons(ph, PENCIL, None, 50, seed=2)
    assert np.all(b.fate == 1)
    np.testing.assert_allclose(b.weight, math.exp(-0.3 * 2.5), rtol=1e-14)


def test_ballistic_fraction():
    n = 200_000
    ph = PhantomSpec(mu_s=2.0, mu_a=0.0, thickness=1.0)
    b = run_photons(ph, PENCIL, None, n, seed=5)
    frac = np.mean((b.fate == 1) & (b.n_scatter == 0))
    p = math.exp(-2)
    assert abs(frac - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_energy_conservation_without_absorption():
    n = 20_000
    ph = PhantomSpec(mu_s=6.0, mu_a=0.0, thickness=1.0)
    b = run_photons(ph, PENCIL, None, n, seed=7)
    assert set(np.unique(b.fate)) <= {0, 1}
    assert b.weight.sum() == pytest.approx(n, rel=1e-3)


def test_roulette_preserves_expected_weight():
    n = 20_000
    ph = PhantomSpec(mu_s=5.0, mu_a=1.0, thickness=2.0)
    b = run_photons(ph, PENCIL, None, n, seed=8)
    counts = b.fate_counts()
    assert counts["roulette"] > 0 and counts["discarded"] == 0
    assert np.all(b.weight[b.fate == 3] == 0)


def transmitted(ph, n=100_000, seed=9):
    b = run_photons(ph, PENCIL, None, n, seed=seed)
    w = np.where(b.fate == 1, b.weight, 0.0)
    return w.mean(), w.std(ddof=1) / math.sqrt(n)


def test_transmission_monotone_in_thickness():
    t1, s1 = transmitted(PhantomSpec(mu_s=3.0, mu_a=0.05, thickness=0.5))
    t2, s2 = transmitted(PhantomSpec(mu_s=3.0, mu_a=0.05, thickness=1.0), seed=10)
    assert t2 < t1 + 3 * math.hypot(s1, s2)
    assert t2 < t1


def test_transmission_monotone_in_absorption():
    t1, s1 = transmitted(PhantomSpec(mu_s=3.0, mu_a=0.0, thickness=1.0))
    t2, s2 = transmitted(PhantomSpec(mu_s=3.0, mu_a=0.5, thickness=1.0), seed=12)
    assert t2 < t1 + 3 * math.hypot(s1, s2)
    assert t2 < t1


def test_results_independent_of_chunking_and_workers():
    ph = PhantomSpec(mu_s=4.0, thickness=1.0)
    a = run_photons(ph, PENCIL, None, 3000, seed=4)
    b = run_photons(ph, PENCIL, None, 3000, seed=4, chunk=700)
    c = run_photons(ph, PENCIL, None, 3000, seed=4, jobs=2, chunk=1000)
    for name in ("x", "y", "weight", "n_scatter", "fate"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        np.testing.assert_array_equal(getattr(a, name), getattr(c, name))


def test_single_photon_matches_batch():
    ph = PhantomSpec(mu_s=4.0, thickness=1.0)
    batch = run_photons(ph, PENCIL, None, 10, seed=6)
    ex = propagate_photon(ph, PENCIL, seed=6, photon_id=7)
    assert ex.position[0] == batch.x[7] and ex.weight == batch.weight[7]
    assert ex.time_of_flight_us > 0


def test_fresnel_traps_light_but_conserves_energy():
    n = 10_000
    ph = PhantomSpec(mu_s=2.0, mu_a=0.0, thickness=1.0, fresnel=True)
    b = run_photons(ph, PENCIL, None, n, seed=13)
    assert b.weight.sum() == pytest.approx(n, rel=1e-3)
    plain = run_photons(PhantomSpec(mu_s=2.0, mu_a=0.0, thickness=1.0), PENCIL, None, n, seed=13)
    assert b.path.mean() > plain.path.mean()


# ----------------------------------------------------------------- frames

def scene_with(image, geometry="transmission", **kw):
    det = DetectorSpec(image.shape, 0.5)
    return SceneSpec(geometry, SourceSpec(beam_radius=3.0), det, target_frames=(TargetFrame(image, 100, 1000),), **kw)


def test_black_target_gives_dark_frames():
    scene = scene_with(np.zeros((8, 8), bool))
    frames = simulate_frames(PhantomSpec(thickness=0.5), scene, 2000, seed=1)
    assert all(np.all(f.pixels == 0) for f in frames)


def test_white_pixels_brighter_in_clear_transmission():
    img = np.zeros((8, 8), bool)
    img[2:6, 3] = True
    frames = simulate_frames(PhantomSpec(thickness=0.0), scene_with(img), 20_000, seed=1)
    on = frames[2].pixels
    assert np.all(on[~img] == 0) and np.all(on[img] > 0)


def test_frames_scale_with_photon_count():
    img = np.ones((8, 8), bool)
    ph = PhantomSpec(mu_s=2.0, thickness=0.5)
    a = simulate_frames(ph, scene_with(img), 20_000, seed=1)[2].pixels.sum()
    b = simulate_frames(ph, scene_with(img), 40_000, seed=2)[2].pixels.sum()
    assert b / a == pytest.approx(2.0, rel=0.03)


def test_frames_deterministic_across_jobs():
    img = np.ones((8, 8), bool)
    ph = PhantomSpec(mu_s=2.0, thickness=0.5)
    a = simulate_frames(ph, scene_with(img), 5000, seed=3)
    b = simulate_frames(ph, scene_with(img), 5000, seed=3, jobs=2)
    assert [f.t for f in a] == [f.t for f in b]
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)


def test_reflection_white_target_returns_light():
    img_w, img_b = np.ones((8, 8), bool), np.zeros((8, 8), bool)
    ph = PhantomSpec(mu_s=1.0, mu_a=0.01, thickness=0.5)
    white = simulate_frames(ph, scene_with(img_w, "reflection", target_plane=0.5), 20_000, seed=2)[2]
    black = simulate_frames(ph, scene_with(img_b, "reflection", target_plane=0.5), 20_000, seed=2)[2]
    assert white.pixels.sum() > 1.5 * black.pixels.sum() > 0


def test_schedule_and_triggers():
    scene = scene_with(np.ones((4, 4), bool), rise_us=10)
    assert frame_schedule(scene) == [(0, 0), (100, 0), (110, 1), (1090, 1), (1100, 0)]
    assert scene_triggers(scene) == [(100, "rise"), (1100, "fall")]


def test_frame_stack_roundtrip(tmp_path):
    frames = [IntensityFrame(np.arange(6, dtype=np.float32).reshape(2, 3), 0),
              IntensityFrame(np.ones((2, 3), np.float32), 250)]
    path = tmp_path / "f.ifr"
    write_frames(frames, path)
    raw = path.read_bytes()
    assert raw[:4] == b"IFR1" and len(raw) == 12 + 2 * (8 + 6 * 4)
    back = read_frames(path)
    assert [f.t for f in back] == [0, 250]
    np.testing.assert_array_equal(back[0].pixels, frames[0].pixels)
