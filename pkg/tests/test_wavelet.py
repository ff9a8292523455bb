import numpy as np
import pytest

from gseal.errors import ValidationError
from gseal.gradcore.tensor import Parameter
from gseal.wavelet import SubbandSet, dwt2, idwt2, ll


def test_constant_image():
    img = np.full((3, 8, 8), 0.7)
    s = dwt2(img)
    np.testing.assert_allclose(s.LL, 0.7, atol=1e-15)
    for band in (s.LH, s.HL, s.HH):
        np.testing.assert_allclose(band, 0.0, atol=1e-15)


def test_single_block_mean():
    img = np.array([[1.0, 3.0], [5.0, 7.0]])
    assert dwt2(img).LL[0, 0] == 4.0


def test_perfect_reconstruction():
    rng = np.random.default_rng(0)
    img = rng.random((3, 16, 20))
    back = idwt2(dwt2(img))
    assert np.abs(back - img).max() < 1e-6


def test_reconstruction_ortho_variant():
    rng = np.random.default_rng(1)
    img = rng.random((3, 12, 12))
    s = dwt2(img, scaling="ortho")
    assert np.abs(idwt2(s) - img).max() < 1e-12


def test_energy_conserved_in_ortho_scaling():
    rng = np.random.default_rng(2)
    img = rng.standard_normal((3, 10, 10))
    s = dwt2(img, scaling="ortho")
    e = sum((band ** 2).sum() for band in (s.LL, s.LH, s.HL, s.HH))
    assert abs(e - (img ** 2).sum()) < 1e-9


def test_idwt_linearity():
    rng = np.random.default_rng(3)
    s1 = dwt2(rng.random((3, 8, 8)))
    s2 = dwt2(rng.random((3, 8, 8)))
    both = SubbandSet(s1.LL + s2.LL, s1.LH + s2.LH, s1.HL + s2.HL,
                      s1.HH + s2.HH, 8, 8)
    assert np.abs(idwt2(both) - (idwt2(s1) + idwt2(s2))).max() < 1e-9


def test_zero_details_constant_ll():
    z = np.zeros((3, 4, 4))
    s = SubbandSet(np.full((3, 4, 4), 2.5), z, z, z, 8, 8)
    np.testing.assert_allclose(idwt2(s), 2.5, atol=1e-15)


def test_odd_size_rejected():
    with pytest.raises(ValidationError):
        dwt2(np.zeros((3, 7, 8)))
    with pytest.raises(ValidationError):
        ll(np.zeros((3, 8, 9)))


def test_ll_checkerboard():
    img = np.indices((6, 6)).sum(axis=0) % 2
    np.testing.assert_allclose(ll(img.astype(float)).data, 0.5)


def test_ll_matches_dwt_and_is_linear():
    rng = np.random.default_rng(4)
    x = rng.random((2, 3, 8, 8))
    y = rng.random((2, 3, 8, 8))
    np.testing.assert_allclose(ll(x).data, dwt2(x).LL, atol=1e-12)
    lhs = ll(2.0 * x + 3.0 * y).data
    rhs = 2.0 * ll(x).data + 3.0 * ll(y).data
    assert np.abs(lhs - rhs).max() < 1e-9


def test_ll_gradient_is_quarter():
    p = Parameter(np.random.default_rng(5).random((3, 6, 6)))
    ll(p).sum().backward()
    np.testing.assert_allclose(np.asarray(p.grad), 0.25, atol=1e-15)
