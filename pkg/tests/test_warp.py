import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from svfthick.warp import (TapeMismatchError, compose_adjoint, compose_displacements, identity_grid,
                           warp_scalar, warp_scalar_adjoint, warp_vector)

from fdcheck import numeric_grad, rel_error


def loop_warp(m, u):
    """Independent pull-warp oracle: explicit loops, clamped trilinear weights."""
    nx, ny, nz = m.shape
    out = np.zeros_like(m)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                p = np.array([i, j, k]) + u[i, j, k]
                p = np.clip(p, 0, np.array(m.shape) - 1)
                lo = np.minimum(np.floor(p).astype(int), np.maximum(np.array(m.shape) - 2, 0))
                f = p - lo
                acc = 0.0
                for c in np.ndindex(2, 2, 2):
                    w = np.prod([f[d] if c[d] else 1 - f[d] for d in range(3)])
                    if w:
                        acc += w * m[lo[0] + c[0], lo[1] + c[1], lo[2] + c[2]]
                out[i, j, k] = acc
    return out


def test_zero_displacement_is_identity(rng):
    m = rng.normal(size=(5, 4, 3))
    out, _ = warp_scalar(m, np.zeros((5, 4, 3, 3)))
    assert np.array_equal(out, m)


def test_integer_shift_moves_samples():
    m = np.arange(5.0)[:, None, None] * np.ones((5, 2, 2))
    u = np.zeros((5, 2, 2, 3))
    u[..., 0] = 1.0
    out, _ = warp_scalar(m, u)
    np.testing.assert_array_equal(out[:, 0, 0], [1, 2, 3, 4, 4])


def test_matches_loop_oracle_and_scipy(rng):
    m = rng.normal(size=(5, 6, 4))
    u = rng.normal(scale=1.5, size=(5, 6, 4, 3))
    out, _ = warp_scalar(m, u)
    np.testing.assert_allclose(out, loop_warp(m, u), atol=1e-12)
    coords = np.clip(identity_grid(m.shape) + u, 0, np.array(m.shape) - 1)
    ref = map_coordinates(m, np.moveaxis(coords, -1, 0), order=1)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_warp_vector_is_componentwise(rng):
    a = rng.normal(size=(4, 4, 4, 3))
    u = rng.normal(size=(4, 4, 4, 3))
    out, _ = warp_vector(a, u)
    for c in range(3):
        np.testing.assert_allclose(out[..., c], warp_scalar(a[..., c], u)[0], atol=1e-14)


def test_composition_semantics(rng):
    a = rng.normal(scale=0.7, size=(5, 5, 5, 3))
    b = rng.normal(scale=0.7, size=(5, 5, 5, 3))
    c, _ = compose_displacements(a, b)
    expected = b + np.stack([loop_warp(a[..., k], b) for k in range(3)], axis=-1)
    np.testing.assert_allclose(c, expected, atol=1e-12)
    zero = np.zeros_like(a)
    np.testing.assert_allclose(compose_displacements(a, zero)[0], a, atol=1e-15)
    np.testing.assert_allclose(compose_displacements(zero, b)[0], b, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_warp_adjoint_is_exact_transpose(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(4, 5, 3))
    u = rng.normal(scale=2.0, size=(4, 5, 3, 3))
    g = rng.normal(size=m.shape)
    _, tape = warp_scalar(m, u)
    g_m, _ = warp_scalar_adjoint(tape, m, u, g)
    dm = rng.normal(size=m.shape)
    # the warp is linear in m: <g, W dm> == <W^T g, dm>
    assert np.sum(g * warp_scalar(dm, u)[0]) == pytest.approx(np.sum(g_m * dm), rel=1e-12, abs=1e-12)


def test_warp_gradients_match_finite_differences(rng):
    m = rng.normal(size=(5, 4, 6))
    u = rng.uniform(-1.5, 1.5, size=(5, 4, 6, 3))
    w = rng.normal(size=m.shape)
    _, tape = warp_scalar(m, u)
    g_m, g_u = warp_scalar_adjoint(tape, m, u, w)
    assert rel_error(g_m, numeric_grad(lambda x: np.sum(w * warp_scalar(x, u)[0]), m)) <= 1e-4
    assert rel_error(g_u, numeric_grad(lambda x: np.sum(w * warp_scalar(m, x)[0]), u)) <= 1e-4


def test_compose_gradients_match_finite_differences(rng):
    a = rng.uniform(-1, 1, size=(4, 5, 4, 3))
    b = rng.uniform(-1, 1, size=(4, 5, 4, 3))
    w = rng.normal(size=a.shape)
    _, tape = compose_displacements(a, b)
    g_a, g_b = compose_adjoint(tape, a, b, w)
    assert rel_error(g_a, numeric_grad(lambda x: np.sum(w * compose_displacements(x, b)[0]), a)) <= 1e-4
    assert rel_error(g_b, numeric_grad(lambda x: np.sum(w * compose_displacements(a, x)[0]), b)) <= 1e-4


def test_clamped_coordinates_have_zero_gradient():
    m = np.arange(27.0).reshape(3, 3, 3)
    u = np.full((3, 3, 3, 3), 10.0)
    _, tape = warp_scalar(m, u)
    _, g_u = warp_scalar_adjoint(tape, m, u, np.ones_like(m))
    assert np.all(g_u == 0)


def test_tape_mismatch_and_shape_errors(rng):
    m = rng.normal(size=(3, 3, 3))
    u = rng.normal(size=(3, 3, 3, 3))
    _, tape = warp_scalar(m, u)
    with pytest.raises(TapeMismatchError):
        warp_scalar_adjoint(tape, m, u + 1, np.ones_like(m))
    with pytest.raises(TapeMismatchError):
        warp_scalar_adjoint(tape, m, u, np.ones((3, 3, 2)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        warp_scalar(np.zeros((3, 3, 4)), u)
    with pytest.raises(ValueError, match="displacement"):
        warp_scalar(m, np.zeros((3, 3, 3, 2)))


def test_adjoint_trivial_cases(rng):
    m = rng.normal(size=(4, 3, 5))
    u = rng.normal(size=(4, 3, 5, 3))
    _, tape = warp_scalar(m, u)
    g_m, g_u = warp_scalar_adjoint(tape, m, u, np.zeros_like(m))
    assert not g_m.any() and not g_u.any()
    zero = np.zeros_like(u)
    _, tape = warp_scalar(m, zero)
    g_m, _ = warp_scalar_adjoint(tape, m, zero, np.ones_like(m))
    assert g_m.sum() == pytest.approx(m.size) and np.allclose(g_m, 1.0)


def test_tape_replay_is_bit_exact(rng):
    from svfthick.warp import _sample
    m = rng.normal(size=(5, 5, 5))
    u = rng.normal(size=(5, 5, 5, 3))
    out, tape = warp_scalar(m, u)
    assert np.array_equal(_sample(tape, m).reshape(m.shape), out)


def test_constant_fields_compose_to_their_sum():
    a = np.broadcast_to([0.3, -0.2, 0.1], (7, 7, 7, 3)).copy()
    b = np.broadcast_to([0.5, 0.25, -0.4], (7, 7, 7, 3)).copy()
    c, _ = compose_displacements(a, b)
    np.testing.assert_allclose(c[1:-1, 1:-1, 1:-1], np.broadcast_to([0.8, 0.05, -0.3], (5, 5, 5, 3)), atol=1e-14)
