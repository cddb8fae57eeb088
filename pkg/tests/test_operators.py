import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntkdip import numerics as nx
from ntkdip import operators as ops


def cvec(seed, n):
    r = np.random.default_rng(seed)
    return r.normal(size=n) + 1j * r.normal(size=n)


def half_mask(q, seed=0):
    m = np.zeros(q, dtype=bool)
    m[np.random.default_rng(seed).choice(q, q // 2, replace=False)] = True
    return m


def all_maps(q=8, seed=0):
    rng = nx.RngStream(seed)
    return [
        ops.masked_fourier(half_mask(q, seed)),
        ops.masked_fourier(half_mask(q, seed + 1), ops.gaussian_coil_maps(q, 2, rng)),
        ops.inpainting(half_mask(q, seed + 2)),
        ops.dense_map(np.random.default_rng(seed).normal(size=(3, q)) + 1j),
    ]


def test_inpainting_apply_and_adjoint():
    a = ops.inpainting([1, 0, 1, 0])
    np.testing.assert_array_equal(a.apply([1, 2, 3, 4]), [1, 3])
    np.testing.assert_array_equal(a.adjoint([5, 6]), [5, 0, 6, 0])


def test_full_mask_fourier_is_fft():
    v = cvec(1, 16)
    a = ops.masked_fourier(np.ones(16))
    np.testing.assert_allclose(a.apply(v), nx.fft(v), atol=1e-13)
    np.testing.assert_allclose(a.adjoint(v), nx.ifft(v), atol=1e-13)


def test_coil_composite_matches_dense_oracle():
    q = 8
    maps = ops.gaussian_coil_maps(q, 2, nx.RngStream(3))
    mask = half_mask(q, 3)
    a = ops.masked_fourier(mask, maps)
    f = nx.dft_matrix(q)
    dense = np.concatenate([f[mask] @ np.diag(s) for s in maps])
    v = cvec(4, q)
    np.testing.assert_allclose(a.apply(v), dense @ v, atol=1e-12)
    np.testing.assert_allclose(a.to_matrix(), dense, atol=1e-12)


@pytest.mark.parametrize("idx", range(4))
def test_adjoint_inner_product(idx):
    a = all_maps(8, idx)[idx]
    for k in range(100):
        v, w = cvec(k, a.q), cvec(1000 + k, a.out_dim)
        lhs = np.vdot(w, a.apply(v))
        rhs = np.vdot(a.adjoint(w), v)
        assert abs(lhs - rhs) <= 1e-11 * max(1.0, abs(lhs))


def test_dimension_errors():
    a = ops.masked_fourier(half_mask(8))
    with pytest.raises(ops.DimensionError):
        a.apply(np.ones(4))
    with pytest.raises(ops.DimensionError):
        a.adjoint(np.ones(8))
    with pytest.raises(ops.DimensionError):
        ops.data_correction(a, np.ones(3), np.ones(8))


def test_coil_maps_must_be_normalized():
    with pytest.raises(ValueError):
        ops.masked_fourier(np.ones(4), np.ones((2, 4)))


def test_fourier_needs_power_of_two():
    with pytest.raises(nx.SizeError):
        ops.masked_fourier(np.ones(6))


def test_normal_operator_norm_bounded():
    a = ops.masked_fourier(half_mask(32), ops.gaussian_coil_maps(32, 4, nx.RngStream(5)))
    v = cvec(0, 32)
    for _ in range(200):
        v = a.normal(v)
        v /= np.linalg.norm(v)
    assert np.linalg.norm(a.normal(v)) <= 1 + 1e-10


# --- real embedding ------------------------------------------------------


def test_embedding_full_mask_orthogonal():
    f = ops.real_fourier_embedding(2)
    np.testing.assert_allclose(f.T @ f, np.eye(4), atol=1e-12)


def test_embedding_inpainting_block_diagonal():
    mask = np.array([1, 0, 1, 1], dtype=bool)
    sel = np.eye(4)[mask]
    e = ops.materialize_real(ops.inpainting(mask))
    np.testing.assert_array_equal(e, np.block([[sel, np.zeros_like(sel)], [np.zeros_like(sel), sel]]))


@pytest.mark.parametrize("idx", range(4))
def test_embedding_matches_complex_apply(idx):
    a = all_maps(8, idx)[idx]
    e = ops.materialize_real(a)
    assert e.shape == (2 * a.out_dim, 2 * a.q)
    for k in range(50):
        v = cvec(k, a.q)
        assert np.linalg.norm(e @ nx.stack_real(v) - nx.stack_real(a.apply(v))) <= 1e-12


def test_materialize_size_guard():
    with pytest.raises(nx.SizeError):
        ops.materialize_real(ops.masked_fourier(np.ones(128)))


# --- data correction -----------------------------------------------------


def test_correction_fixed_point():
    a = ops.masked_fourier(half_mask(16))
    x = cvec(2, 16)
    np.testing.assert_allclose(ops.data_correction(a, a.apply(x), x), x, atol=1e-12)


def test_correction_full_mask_ignores_estimate():
    a = ops.masked_fourier(np.ones(16))
    y = cvec(3, 16)
    np.testing.assert_allclose(ops.data_correction(a, y, cvec(4, 16)), nx.ifft(y), atol=1e-12)


@pytest.mark.parametrize("idx", [0, 2])
def test_correction_consistency_and_idempotence(idx):
    a = all_maps(16, idx)[idx]
    y, xhat = cvec(5, a.out_dim), cvec(6, 16)
    xc = ops.data_correction(a, y, xhat)
    assert np.abs(a.apply(xc) - y).max() <= 1e-10
    np.testing.assert_allclose(ops.data_correction(a, y, xc), xc, atol=1e-10)


def test_multicoil_correction_is_unit_gradient_step():
    # with overlapping coils A A^H != I, so the coil-combined result is
    # x + A^H (y - A x) rather than an exact projection
    a = all_maps(16, 1)[1]
    y, xhat = cvec(5, a.out_dim), cvec(6, 16)
    expected = xhat + a.adjoint(y - a.apply(xhat))
    np.testing.assert_allclose(ops.data_correction(a, y, xhat), expected, atol=1e-12)


def test_correction_keeps_unsampled_measurements():
    mask = half_mask(16, 7)
    a = ops.masked_fourier(mask)
    xhat = cvec(8, 16)
    xc = ops.data_correction(a, cvec(9, 8), xhat)
    np.testing.assert_allclose(nx.fft(xc)[~mask], nx.fft(xhat)[~mask], atol=1e-10)


def test_correction_rejects_dense():
    with pytest.raises(ValueError):
        ops.data_correction(ops.dense_map(np.eye(4)), np.ones(4), np.ones(4))


# --- masks, files --------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([16, 32, 64, 128]), st.sampled_from([2, 4, 8]), st.integers(0, 10_000))
def test_variable_density_mask(q, accel, seed):
    m = ops.variable_density_mask(q, accel, nx.RngStream(seed))
    assert m.sum() == q // accel
    f = ops.signed_frequencies(q)
    assert m[f == 0].all()
    if q // accel >= 3:
        assert m[np.abs(f) <= 1].all()  # center lines always kept


def test_mask_is_deterministic():
    a = ops.variable_density_mask(64, 4, nx.RngStream(11))
    b = ops.variable_density_mask(64, 4, nx.RngStream(11))
    np.testing.assert_array_equal(a, b)


def test_coil_maps_normalized():
    maps = ops.gaussian_coil_maps(32, 3, nx.RngStream(1))
    np.testing.assert_allclose(np.sum(np.abs(maps) ** 2, axis=0), 1.0, atol=1e-12)


def test_mask_and_signal_files(tmp_path):
    m = ops.variable_density_mask(16, 2, nx.RngStream(0))
    ops.save_mask(tmp_path / "m.txt", m)
    np.testing.assert_array_equal(ops.load_mask(tmp_path / "m.txt"), m)
    z = cvec(1, 8)
    ops.save_signal(tmp_path / "s.csv", z)
    assert ops.load_signal(tmp_path / "s.csv") == nx.ComplexSignal.from_complex(z)
    (tmp_path / "bad.txt").write_text("1\n2\n")
    with pytest.raises(ValueError):
        ops.load_mask(tmp_path / "bad.txt")
