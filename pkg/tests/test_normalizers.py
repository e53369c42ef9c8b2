import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from graphflow import autodiff as ad
from graphflow.normalizers import (
    POSITIVE_EPS,
    AffineNormalizer,
    DivergenceError,
    MonotonicNormalizer,
    NumericalError,
    affine_apply,
    affine_invert,
    clenshaw_curtis,
    make_normalizer,
    quadrature,
    umnn_apply,
    umnn_invert,
)

from conftest import rel_err


def forced_umnn(f_value, beta, embed_size=3):
    """UMNN whose integrand is the constant ``f_value`` and offset ``beta``."""
    norm = MonotonicNormalizer(embed_size, hidden=[4], n_nodes=50)
    p = norm.init(np.random.default_rng(0))
    last = norm.integrand_net.n_layers - 1
    p[f"{norm.integrand_net.name}.W{last}"][:] = 0.0
    u = f_value - 1.0 - POSITIVE_EPS
    p[f"{norm.integrand_net.name}.b{last}"][:] = u if u >= 0 else np.log1p(u)
    p[f"{norm.offset_net.name}.W0"][:] = 0.0
    p[f"{norm.offset_net.name}.b0"][:] = beta
    return norm, p


def random_umnn(rng, embed_size=3):
    norm = MonotonicNormalizer(embed_size, hidden=[16, 16], n_nodes=50)
    return norm, norm.init(rng)


# -- affine ----------------------------------------------------------------------


def test_affine_examples():
    z, ld = affine_apply(1.0, 0.0, 0.0)
    assert z.data == 1.0 and ld.data == 0.0
    z, ld = affine_apply(2.0, 3.0, np.log(2.0))
    assert z.data == pytest.approx(7.0, abs=1e-14) and ld.data == pytest.approx(np.log(2))
    assert affine_invert(3.0, 3.0, 0.7) == 0.0
    assert affine_invert(5.0, 1.5, 0.0) == 3.5


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(-3, 3))
def test_affine_round_trip(x, m, s):
    z = affine_apply(x, m, s)[0].data
    assert abs(affine_invert(z, m, s) - x) < 1e-12 * max(1.0, abs(x), abs(m) * np.exp(-s))


def test_affine_normalizer_log_diag_independent_of_x(rng):
    norm = AffineNormalizer(4)
    p = norm.init(rng)
    c = rng.normal(size=(5, 3, 4))
    _, a = norm.apply(p, rng.normal(size=(5, 3)), c)
    _, b = norm.apply(p, rng.normal(size=(5, 3)), c)
    assert np.array_equal(a.data, b.data)
    x = rng.normal(size=(5, 3))
    z, _ = norm.apply(p, x, c)
    assert np.allclose(norm.invert(p, z.data, c), x, atol=1e-12)


# -- quadrature --------------------------------------------------------------------


def test_quadrature_examples():
    for x in (0.3, 2.0, -4.5):
        assert quadrature(np.ones_like, 0.0, x) == pytest.approx(x, abs=1e-12)
    assert quadrature(lambda t: t * t, 0.0, 1.0, n=32) == pytest.approx(1 / 3, abs=1e-10)
    assert quadrature(np.exp, 0.0, 1.0, n=64) == pytest.approx(np.e - 1, abs=1e-9)


def test_quadrature_reversed_interval_changes_sign():
    assert quadrature(np.exp, 1.0, 0.0) == pytest.approx(-(np.e - 1), abs=1e-12)


def test_quadrature_rejects_few_nodes_and_non_finite():
    with pytest.raises(ValueError):
        quadrature(np.exp, 0, 1, n=4)
    with pytest.raises(NumericalError, match="t="):
        quadrature(lambda t: np.where(t > 0, 1.0, np.nan), 0.0, 1.0)


def test_weights_sum_to_interval_length():
    for n in (8, 9, 50, 51):
        x, w = clenshaw_curtis(n)
        assert w.sum() == pytest.approx(2.0, abs=1e-13)
        assert np.allclose(w, w[::-1]) and np.all(w > 0)


@given(st.floats(0.1, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_quadrature_matches_scipy(a, lo, hi):
    fn = lambda t: np.exp(-a * t * t) + 1.0 / (1.0 + t * t)
    ref, _ = integrate.quad(fn, lo, hi, epsabs=1e-13)
    assert quadrature(fn, lo, hi) == pytest.approx(ref, abs=1e-9)


# -- monotonic normalizer ----------------------------------------------------------


def test_forced_identity():
    norm, p = forced_umnn(1.0, 0.0)
    x = np.array([[-3.0, 0.0, 2.5]])
    z, ld = umnn_apply(norm, p, x, np.zeros((1, 3, 3)))
    assert np.allclose(z.data, x, atol=1e-12) and np.allclose(ld.data, 0.0, atol=1e-12)
    zt = np.array([[-1.0, 0.25, 4.0]])
    assert np.allclose(umnn_invert(norm, p, zt, np.zeros((1, 3, 3))), zt, atol=1e-8)


def test_forced_constant_two():
    norm, p = forced_umnn(2.0, 1.0)
    z, ld = norm.apply(p, np.array([3.0]), np.zeros((1, 3)))
    assert z.data[0] == pytest.approx(7.0, abs=1e-12)
    assert ld.data[0] == pytest.approx(np.log(2.0), abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_monotone_in_x(seed):
    r = np.random.default_rng(seed)
    norm, p = random_umnn(r)
    c = r.normal(size=(1, 3))
    x = np.sort(r.uniform(-6, 6, size=40))
    z = norm.forward_z(p, x, np.broadcast_to(c, (40, 3)))
    assert np.all(np.diff(z) > 0)


@given(st.integers(0, 2**31 - 1))
def test_log_diag_matches_fd_and_autodiff(seed):
    r = np.random.default_rng(seed)
    norm, p = random_umnn(r)
    x = r.uniform(-3, 3, size=6)
    c = r.normal(size=(6, 3))
    leaf = ad.Value(x)
    z, ld = norm.apply(p, leaf, c)
    (g,) = [ad.backward(ad.vsum(z), [leaf])[leaf.id]]
    h = 1e-5
    fd = (norm.forward_z(p, x + h, c) - norm.forward_z(p, x - h, c)) / (2 * h)
    assert rel_err(g, np.exp(ld.data)) < 1e-12
    assert rel_err(np.exp(ld.data), fd) < 1e-4


def test_affine_log_diag_matches_fd(rng):
    norm = AffineNormalizer(3)
    p = norm.init(rng)
    x, c = rng.normal(size=5), rng.normal(size=(5, 3))
    h = 1e-5
    fd = (norm.apply(p, x + h, c)[0].data - norm.apply(p, x - h, c)[0].data) / (2 * h)
    assert rel_err(np.exp(norm.apply(p, x, c)[1].data), fd) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_inversion_round_trip(seed):
    r = np.random.default_rng(seed)
    norm, p = random_umnn(r)
    x = r.normal(scale=3, size=20)
    c = r.normal(size=(20, 3))
    z = norm.apply(p, x, c)[0].data
    back = norm.invert(p, z, c, tol=1e-8)
    assert np.max(np.abs(back - x)) < 1e-6


@given(st.integers(0, 2**31 - 1))
def test_inversion_is_monotone(seed):
    r = np.random.default_rng(seed)
    norm, p = random_umnn(r)
    c = np.broadcast_to(r.normal(size=3), (15, 3))
    z = np.sort(r.normal(scale=4, size=15))
    x = norm.invert(p, z, c)
    assert np.all(np.diff(x) >= 0)


def test_inversion_diverges_on_unreachable_target():
    norm, p = forced_umnn(1.0, 0.0)
    with pytest.raises(DivergenceError):
        norm.invert(p, np.array([1e300]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        norm.invert(p, np.array([0.0]), np.zeros((1, 3)), tol=0)


def test_make_normalizer():
    assert make_normalizer("affine", 4).kind == "affine"
    assert make_normalizer("monotonic", 4, n_nodes=20).n_nodes == 20
    with pytest.raises(ValueError):
        make_normalizer("spline", 4)
