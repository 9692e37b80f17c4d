import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import look_down_z, random_field
from stemsplat.rasterizer import (DEFAULT_SETTINGS, AlphaMask, RenderSettings, foreground_gate,
                                  project_gaussians, render_alpha_mask, write_pgm)
from stemsplat.scene_io import GaussianField, View
from stemsplat.synth import look_at


def _field(means, scales, alphas, quats=None):
    means = np.atleast_2d(np.asarray(means, float))
    n = len(means)
    quats = np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else quats
    return GaussianField.from_activated(means, np.atleast_2d(scales), quats, np.asarray(alphas, float))


def _ray_jacobian(view, x, h=1e-6):
    """Central-difference Jacobian of (px, py, ray distance) wrt world position."""
    def f(p):
        u, _, r = view.project(p[None])
        return np.array([u[0, 0], u[0, 1], r[0]])
    J = np.zeros((3, 3))
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        J[:, j] = (f(x + d) - f(x - d)) / (2 * h)
    return J


def _oracle_projection(field, view, floor=0.3):
    """Independent EWA pushforward: numeric Jacobian plus eigen-decomposition floor."""
    out = []
    for i in range(len(field)):
        mu = field.centers[i].astype(float)
        J = _ray_jacobian(view, mu)
        cov = J @ field.covariances()[i] @ J.T
        w, V = np.linalg.eigh(cov[:2, :2])
        S2 = V @ np.diag(np.maximum(w, floor)) @ V.T
        g = -np.linalg.solve(S2, cov[:2, 2])
        var = cov[2, 2] - cov[:2, 2] @ np.linalg.solve(S2, cov[:2, 2])
        out.append((S2, g, var))
    return out


def test_axis_gaussian_closed_form():
    view = View("v", 1000.0, 1000.0, 320.0, 240.0, 640, 480, np.eye(3), np.zeros(3))
    sp = project_gaussians(_field([0, 0, 10.0], [0.1, 0.1, 0.1], [0.8]), view)
    assert len(sp) == 1
    np.testing.assert_allclose(sp.u[0], [320.0, 240.0], atol=1e-12)
    a, b, c = sp.cov2d[0]
    assert a == pytest.approx(100.0, rel=1e-6) and c == pytest.approx(100.0, rel=1e-6)
    assert abs(b) < 1e-9
    assert np.all(np.abs(sp.g[0]) < 1e-9)
    assert sp.t[0] == pytest.approx(10.0, rel=1e-6)


def test_behind_camera_culled():
    view = look_down_z()
    sp = project_gaussians(_field([[0, 0, -1.0], [0, 0, 5.0]], [[0.1] * 3] * 2, [0.5, 0.5]), view)
    assert list(sp.index) == [1]


def test_projection_matches_numeric_pushforward(rng):
    field = random_field(rng, 40, spread=0.6)
    view = look_down_z(width=200, height=160, f=150.0)
    sp = project_gaussians(field, view)
    oracle = _oracle_projection(field, view)
    assert len(sp) > 10
    for k, i in enumerate(sp.index):
        S2, g, var = oracle[i]
        a, b, c = sp.cov2d[k]
        np.testing.assert_allclose([[a, b], [b, c]], S2, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(sp.g[k], g, rtol=1e-4, atol=1e-8)
        assert sp.depth_var[k] == pytest.approx(max(var, DEFAULT_SETTINGS.depth_var_floor), rel=1e-4, abs=1e-9)


def test_projection_oblique_camera(rng):
    field = random_field(rng, 30, spread=0.5)
    field = GaussianField(field.means + np.float32([3, -2, 0]), field.log_scales, field.raw_quats,
                          field.logit_opacities)
    view = look_at(np.array([20.0, 10.0, 30.0]), np.array([3.0, -2.0, 5.0]), "o", 400, 300, 600.0)
    sp = project_gaussians(field, view)
    oracle = _oracle_projection(field, view)
    assert len(sp) == 30
    for k, i in enumerate(sp.index):
        S2, g, _ = oracle[i]
        a, b, c = sp.cov2d[k]
        np.testing.assert_allclose([[a, b], [b, c]], S2, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(sp.g[k], g, rtol=1e-4, atol=1e-8)


def test_sorted_and_floored(rng):
    field = random_field(rng, 60, scale=(1e-4, 0.2))
    sp = project_gaussians(field, look_down_z())
    assert np.all(np.diff(sp.t) >= 0)
    for a, b, c in sp.cov2d:
        assert np.linalg.eigvalsh([[a, b], [b, c]]).min() >= 0.3 - 1e-9


def _centered_view(size=9, f=50.0):
    # principal point on a pixel center so an on-axis splat peaks exactly at pixel (size//2, size//2)
    return View("c", f, f, size // 2 + 0.5, size // 2 + 0.5, size, size, np.eye(3), np.zeros(3))


def test_single_splat_contribution():
    view = _centered_view()
    sp = project_gaussians(_field([0, 0, 5.0], [0.1] * 3, [0.6]), view)
    m = render_alpha_mask(sp, view)
    # opacity is stored as a float32 logit, so compare against the stored peak
    assert m.alpha[4, 4] == pytest.approx(sp.alpha[0], abs=1e-12)
    assert m.alpha[4, 4] == pytest.approx(0.6, abs=1e-7)


@pytest.mark.parametrize("swap", [False, True])
def test_two_splats_compose(swap):
    view = _centered_view()
    means = [[0, 0, 5.0], [0, 0, 7.0]]
    if swap:
        means = means[::-1]
    sp = project_gaussians(_field(means, [[0.1] * 3] * 2, [0.5, 0.5]), view)
    m = render_alpha_mask(sp, view)
    assert m.alpha[4, 4] == pytest.approx(0.75, abs=1e-12)


def test_alpha_cap_applies():
    view = _centered_view()
    sp = project_gaussians(_field([0, 0, 5.0], [0.1] * 3, [1.0]), view)
    assert render_alpha_mask(sp, view).alpha[4, 4] == pytest.approx(0.99, abs=1e-12)


def test_tiled_equals_naive(rng):
    field = random_field(rng, 300, spread=1.2)
    view = look_down_z(width=100, height=70, f=60.0)
    sp = project_gaussians(field, view)
    a = render_alpha_mask(sp, view)
    b = render_alpha_mask(sp, view, naive=True)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    np.testing.assert_array_equal(a.weight_sum, b.weight_sum)


def test_threaded_render_identical(rng):
    from concurrent.futures import ThreadPoolExecutor
    field = random_field(rng, 200)
    view = look_down_z(width=90, height=64)
    sp = project_gaussians(field, view)
    with ThreadPoolExecutor(3) as ex:
        a = render_alpha_mask(sp, view, executor=ex)
    b = render_alpha_mask(sp, view)
    assert a.alpha.tobytes() == b.alpha.tobytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(0, 29), boost=st.floats(0.0, 0.5))
def test_monotone_in_peak_alpha(seed, k, boost):
    rng = np.random.default_rng(seed)
    field = random_field(rng, 30, alpha=(0.05, 0.5))
    view = look_down_z(width=40, height=30, f=25.0)
    fine = RenderSettings(t_stop=0.0)
    base = render_alpha_mask(project_gaussians(field, view, fine), view, fine).alpha
    logit = field.logit_opacities.copy()
    a = 1 / (1 + np.exp(-logit[k].astype(float))) + boost
    logit[k] = np.log(min(a, 0.999) / (1 - min(a, 0.999)))
    field2 = GaussianField(field.means, field.log_scales, field.raw_quats, logit)
    more = render_alpha_mask(project_gaussians(field2, view, fine), view, fine).alpha
    assert np.all(more >= base - 1e-12)


def test_culled_gaussians_do_not_change_mask(rng):
    view = look_down_z(width=60, height=40, f=40.0)
    field = random_field(rng, 50, spread=0.6)
    # add Gaussians just outside the expanded image rectangle and behind the camera
    extra = GaussianField.from_activated(
        np.array([[6.0, 0.0, 5.0], [0.0, -8.0, 5.0], [0.0, 0.0, -3.0]]), np.full((3, 3), 0.05),
        np.tile([1.0, 0, 0, 0], (3, 1)), np.full(3, 0.9))
    both = GaussianField(np.vstack([field.means, extra.means]), np.vstack([field.log_scales, extra.log_scales]),
                         np.vstack([field.raw_quats, extra.raw_quats]),
                         np.concatenate([field.logit_opacities, extra.logit_opacities]))
    sp = project_gaussians(both, view)
    assert not set(range(50, 53)) & set(sp.index.tolist())
    a = render_alpha_mask(sp, view).alpha
    b = render_alpha_mask(project_gaussians(field, view), view).alpha
    np.testing.assert_array_equal(a, b)


def test_values_in_unit_interval(rng):
    field = random_field(rng, 200, alpha=(0.5, 1.0))
    view = look_down_z()
    m = render_alpha_mask(project_gaussians(field, view), view)
    assert m.alpha.min() >= 0.0 and m.alpha.max() <= 1.0


def test_foreground_gate_examples():
    m = AlphaMask("m", np.array([[0.9, 0.0]]))
    assert foreground_gate(m, (0.5, 0.5), 0.1)
    for tau in (0.0, 0.1, 0.5):
        assert not foreground_gate(m, (1.5, 0.5), tau)
    assert not foreground_gate(m, (-0.5, 0.5), 0.1)
    assert not foreground_gate(m, (2.5, 0.5), 0.1)


def test_foreground_gate_threshold_sweep():
    for a in np.linspace(0.0, 1.0, 21):
        m = AlphaMask("m", np.full((2, 2), a))
        for tau in np.linspace(0.0, 1.0, 41):
            assert foreground_gate(m, (1.0, 1.0), tau) == (a > tau)


def test_write_pgm(tmp_path):
    m = AlphaMask("m", np.array([[0.0, 0.5, 1.0]]))
    p = tmp_path / "m.pgm"
    write_pgm(m, p)
    data = p.read_bytes()
    header = b"P5\n3 1\n65535\n"
    assert data.startswith(header)
    vals = np.frombuffer(data[len(header):], dtype=">u2")
    np.testing.assert_array_equal(vals, [0, 32768, 65535])
