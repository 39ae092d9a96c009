import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ruas.config import ConfigError, WarmStartConfig
from ruas.image_model import (
    IlluminationState, PreconditionError, compose, decompose, warm_start, window_max,
)


def const(v, c=3, h=4, w=4):
    return torch.full((1, c, h, w), v, dtype=torch.float64)


def test_compose_identity_illumination():
    assert torch.equal(compose(const(0.8), const(1.0, c=1)), const(0.8))


def test_compose_scalar_scaling():
    assert torch.allclose(compose(const(1.0), const(0.25, c=1)), const(0.25))


def test_compose_shape_mismatch():
    with pytest.raises(ValueError):
        compose(const(0.5), const(0.5, c=1, h=3))
    with pytest.raises(ValueError):
        compose(const(0.5), const(0.5, c=3))


def test_compose_decompose_round_trip():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=g)
    t = torch.rand(1, 1, 4, 4, dtype=torch.float64, generator=g).clamp(1e-3, 1.0)
    y = compose(x, t)
    assert (compose(decompose(y, t), t) - y).abs().max() <= 1e-6


def test_decompose_examples():
    y = const(0.3)
    assert torch.equal(decompose(y, const(1.0, c=1)), y)
    assert torch.allclose(decompose(y, const(0.6, c=1)), const(0.5))
    # floor case: no clipping
    assert torch.allclose(decompose(y, const(1e-3, c=1)), const(300.0))


def test_decompose_rejects_unclamped_map():
    with pytest.raises(PreconditionError):
        decompose(const(0.3), const(1e-4, c=1))


def test_warm_start_constant():
    out = warm_start(const(0.5), None, WarmStartConfig())
    assert out.shape == (1, 1, 4, 4)
    assert torch.allclose(out, const(0.5, c=1))


def test_warm_start_channel_max_single_pixel():
    y = torch.tensor([0.2, 0.4, 0.6], dtype=torch.float64).reshape(1, 3, 1, 1)
    out = warm_start(y, None, WarmStartConfig(window=1))
    assert out.item() == pytest.approx(0.6)


def test_warm_start_residual_rectification():
    y, u = const(0.4), const(0.8)
    state = IlluminationState(t=const(0.5, c=1), hat_t=const(0.5, c=1), u=u, r=u - y, k=1)
    out = warm_start(y, state, WarmStartConfig(gamma=0.5))
    assert torch.allclose(out, const(0.6, c=1))


def brute_window_max(img: np.ndarray, window: int) -> np.ndarray:
    """img: C x H x W. Double loop with edge replication."""
    _, H, W = img.shape
    p = window // 2
    out = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            best = -np.inf
            for di in range(-p, p + 1):
                for dj in range(-p, p + 1):
                    ii = min(max(i + di, 0), H - 1)
                    jj = min(max(j + dj, 0), W - 1)
                    best = max(best, img[:, ii, jj].max())
            out[i, j] = best
    return out


@pytest.mark.parametrize("window", [1, 3, 5])
def test_window_max_matches_brute_force(window):
    rng = np.random.default_rng(window)
    img = rng.random((3, 5, 5))
    got = window_max(torch.from_numpy(img)[None], window)[0, 0].numpy()
    np.testing.assert_array_equal(got, brute_window_max(img, window))


def test_warm_start_no_residual_mode_ignores_gamma():
    y, u = const(0.4), const(0.8)
    state = IlluminationState(t=const(0.5, c=1), hat_t=const(0.5, c=1), u=u, r=u - y, k=1)
    out = warm_start(y, state, WarmStartConfig(mode="no-residual"))
    assert torch.allclose(out, const(0.8, c=1))


def test_warm_start_config_validation():
    with pytest.raises(ConfigError):
        WarmStartConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        WarmStartConfig(window=2)
    with pytest.raises(ConfigError):
        WarmStartConfig(mode="bogus")


images = arrays(np.float64, (3, 6, 7), elements=st.floats(0.0, 1.0))


@settings(max_examples=50, deadline=None)
@given(images)
def test_warm_start_dominates_channels(img):
    y = torch.from_numpy(img)[None]
    cfg = WarmStartConfig()
    hat = warm_start(y, None, cfg)
    assert bool((hat >= y.amax(1, keepdim=True).clamp(min=cfg.eps_t)).all())
    assert float(decompose(y, hat).max()) <= 1 + 1e-6
    assert float(hat.min()) >= cfg.eps_t and float(hat.max()) <= 1.0


@settings(max_examples=50, deadline=None)
@given(images, arrays(np.float64, (3, 6, 7), elements=st.floats(0.0, 5.0)), st.floats(0.01, 1.0))
def test_warm_start_bounds_for_later_stages(img, u, gamma):
    y = torch.from_numpy(img)[None]
    u = torch.from_numpy(u)[None]
    cfg = WarmStartConfig(gamma=gamma)
    state = IlluminationState(t=y[:, :1], hat_t=y[:, :1], u=u, r=u - y, k=1)
    hat = warm_start(y, state, cfg)
    assert float(hat.min()) >= cfg.eps_t and float(hat.max()) <= 1.0


@settings(max_examples=30, deadline=None)
@given(images)
def test_identity_illumination_gives_plain_window_max(img):
    y = torch.from_numpy(img)[None]
    cfg = WarmStartConfig()
    state = IlluminationState(t=torch.ones_like(y[:, :1]), hat_t=y[:, :1], u=y, r=y - y, k=1)
    assert torch.equal(warm_start(y, state, cfg), warm_start(y, None, cfg))


@settings(max_examples=50, deadline=None)
@given(images, arrays(np.float64, (1, 6, 7), elements=st.floats(1e-3, 1.0)))
def test_monotone_exposure(img, t):
    y = torch.from_numpy(img)[None]
    u = decompose(y, torch.from_numpy(t)[None])
    assert float(u.mean()) >= float(y.mean()) - 1e-12
