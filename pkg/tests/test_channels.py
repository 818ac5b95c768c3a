import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hdjscc.channels import (ChannelState, average_power, awgn, db_to_linear, derive_seed, linear_to_db,
                             make_generator, mmse_equalize, normalize_power, precode_csit, sample_rayleigh,
                             transmit)
from hdjscc.errors import DegenerateSignalError, SingularFadingError


def c(*vals):
    return torch.tensor([list(vals)], dtype=torch.complex128)


def test_normalize_power_examples():
    assert torch.equal(normalize_power(c(2, 0, 0, 0)), c(2, 0, 0, 0))
    assert torch.allclose(normalize_power(c(2, 2, 2, 2)), c(1, 1, 1, 1))
    x = c(0.1, 0.1j)
    assert torch.equal(normalize_power(x), x)


def test_normalize_power_rejects_degenerate():
    with pytest.raises(DegenerateSignalError):
        normalize_power(torch.zeros(1, 4, dtype=torch.complex64))
    with pytest.raises(DegenerateSignalError):
        normalize_power(torch.zeros(1, 0, dtype=torch.complex64))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_power_constraint_property(k, magnitude, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, k, 2, generator=g, dtype=torch.float64)
    x = torch.view_as_complex(x) * magnitude
    y = normalize_power(x)
    assert torch.all(average_power(y) <= 1 + 1e-6)
    # direction preserved
    ratio = y / x
    assert torch.allclose(ratio.imag, torch.zeros_like(ratio.imag), atol=1e-9)


def test_db_conversion_roundtrip():
    assert db_to_linear(0.0) == 1.0
    assert math.isclose(db_to_linear(10.0), 10.0)
    assert math.isclose(linear_to_db(db_to_linear(3.7)), 3.7)


def test_awgn_noiseless_limit():
    x = c(1, 1j, -0.5)
    assert torch.equal(awgn(x, math.inf), x)


def test_awgn_variance_2db():
    g = make_generator(1)
    x = torch.zeros(1, 10**6, dtype=torch.complex128)
    w = awgn(x, db_to_linear(2.0), g)
    var = float((w.abs() ** 2).mean())
    assert abs(var - 0.6310) / 0.6310 < 0.01


def test_awgn_variance_split_and_zero_mean():
    g = make_generator(2)
    x = torch.zeros(1, 10**6, dtype=torch.complex128)
    w = awgn(x, 1.0, g)
    assert abs(float(w.real.var()) - 0.5) / 0.5 < 0.01
    assert abs(float(w.imag.var()) - 0.5) / 0.5 < 0.01
    n = w.numel()
    sigma = math.sqrt(0.5)
    assert abs(float(w.real.mean())) < 3 * sigma / math.sqrt(n)
    assert abs(float(w.imag.mean())) < 3 * sigma / math.sqrt(n)


def test_awgn_per_item_eta():
    g = make_generator(3)
    x = torch.zeros(2, 200000, dtype=torch.complex128)
    w = awgn(x, torch.tensor([1.0, 10.0]), g)
    v = (w.abs() ** 2).mean(dim=1)
    assert abs(float(v[0]) - 1.0) < 0.02 and abs(float(v[1]) - 0.1) < 0.002


def test_rayleigh_statistics():
    h = sample_rayleigh(make_generator(4), (10**6,), dtype=torch.complex128)
    p = h.abs() ** 2
    assert abs(float(p.mean()) - 1) < 0.02
    assert abs(float((p > 1).double().mean()) - math.exp(-1)) < 0.01
    assert abs(float(h.real.var()) - 0.5) / 0.5 < 0.02
    assert abs(float(h.imag.var()) - 0.5) / 0.5 < 0.02


def test_precode_examples():
    x = c(1, 0)
    assert torch.equal(precode_csit(x, 1.0 + 0j), x)
    assert torch.allclose(precode_csit(x, 1j), c(-1j, 0))
    with pytest.raises(SingularFadingError):
        precode_csit(x, 0j)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_precode_preserves_norm(hr, hi):
    if abs(complex(hr, hi)) < 1e-6:
        return
    x = torch.view_as_complex(torch.randn(1, 16, 2, dtype=torch.float64))
    y = precode_csit(x, complex(hr, hi))
    assert math.isclose(float(torch.linalg.vector_norm(y)), float(torch.linalg.vector_norm(x)), rel_tol=1e-12)


def test_mmse_examples():
    y = c(0.3 + 0.1j, -1)
    assert torch.allclose(mmse_equalize(y, 1.0 + 0j, math.inf, csit=True), y)
    x = c(1, 0.5j)
    out = mmse_equalize(2 * x, 2.0 + 0j, 1.0, csit=True)
    assert torch.allclose(out, 0.8 * x, atol=1e-12)
    out = mmse_equalize(1j * x, 1j, math.inf, csit=False)
    assert torch.allclose(out, x, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-10, 20), st.integers(0, 1000))
def test_csit_reduction_property(hr, hi, eta_db, seed):
    h = complex(hr, hi)
    if abs(h) < 1e-3:
        return
    g = torch.Generator().manual_seed(seed)
    x = torch.view_as_complex(torch.randn(1, 8, 2, generator=g, dtype=torch.float64))
    w = torch.view_as_complex(torch.randn(1, 8, 2, generator=g, dtype=torch.float64))
    eta = db_to_linear(eta_db)
    a = mmse_equalize(abs(h) * x + w, abs(h) + 0j, eta, csit=True)
    # after precoding the effective channel is the real gain |h|
    y = h * precode_csit(x, h) + w
    b = mmse_equalize(y, abs(h) + 0j, eta, csit=False)
    assert torch.allclose(a, b, atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5), st.floats(-20, 30))
def test_mmse_shrinkage(mag, eta_db):
    h = complex(mag, 0)
    eta = db_to_linear(eta_db)
    y = torch.ones(1, 1, dtype=torch.complex128)
    for csit in (True, False):
        gain = float(mmse_equalize(y, h, eta, csit).abs())
        assert gain <= 1 / mag * (1 + 1e-12)


def test_transmit_kinds():
    g = make_generator(5)
    x = normalize_power(torch.view_as_complex(torch.randn(2, 64, 2, dtype=torch.float64)))
    h = torch.tensor([0.5 + 0.5j, -1.0 + 0j], dtype=torch.complex128)
    out = transmit(x, math.inf, "rayleigh_csir", h, g)
    assert torch.allclose(out, x, atol=1e-12)
    with pytest.raises(ValueError):
        transmit(x, 1.0, "rician", h, g)
    with pytest.raises(ValueError):
        transmit(x, 1.0, "rayleigh_csir", None, g)
    with pytest.raises(ValueError):
        awgn(x, -1.0, g)


def test_channel_state():
    s = ChannelState.awgn(2.0)
    assert s.h == 1 and not s.csit
    assert ChannelState(2.0, h=0.5 + 0j).effective_eta == 0.5
    with pytest.raises(ValueError):
        ChannelState(0.0)
    with pytest.raises(IndexError):
        ChannelState(1.0, ell=0)


def test_seed_derivation_is_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    a = torch.randn(4, generator=make_generator(7, 1))
    b = torch.randn(4, generator=make_generator(7, 1))
    assert torch.equal(a, b)
