import numpy as np
import pytest

from mrisde.errors import (
    ConfigurationError,
    DegeneratePixelError,
    ParameterError,
    ShapeMismatchError,
)
from mrisde.grid import Rng, dft2c
from mrisde.measurement import (
    MultiCoilKspace,
    SamplingMask,
    SensitivityMaps,
    adjoint,
    data_consistency,
    forward,
    make_mask,
    nonexpansive_bound,
    normalize_sensitivities,
    random_ellipses,
    shepp_logan,
    simulate_sensitivities,
)


# ---------------------------------------------------------------------------
# masks


def test_full_mask_keeps_everything():
    mask = make_mask("full", 64, 64, 1, 0)
    assert mask.keep.all()
    assert mask.measured_accel() == 1.0


def test_uniform1d_acs_block_and_budget():
    mask = make_mask("uniform1d", 128, 128, 4, 0.08, Rng(0))
    cols = mask.keep[0]
    assert np.array_equal(mask.keep, np.tile(cols, (128, 1)))  # column mask
    lo = (128 - 10) // 2
    assert cols[lo:lo + 10].all()  # 10 centered ACS columns fully kept
    n_kept = int(cols.sum())
    assert abs(n_kept - 32) <= 0.1 * 32


def test_gaussian2d_budget():
    mask = make_mask("gaussian2d", 128, 128, 15, 0.04, Rng(0))
    frac = mask.keep.mean()
    assert abs(frac - 1 / 15) <= 0.1 / 15


@pytest.mark.parametrize("kind", ["uniform1d", "gaussian1d", "gaussian2d", "poisson_vd"])
@pytest.mark.parametrize("accel", [2, 4, 8, 15])
def test_measured_acceleration_within_tolerance(kind, accel):
    mask = make_mask(kind, 96, 96, accel, 0.02, Rng(accel))
    assert abs(mask.measured_accel() - accel) <= 0.1 * accel


def test_acs_fully_sampled_every_kind():
    for kind in ("uniform1d", "gaussian1d"):
        mask = make_mask(kind, 64, 64, 4, 0.06, Rng(1))
        lo = (64 - int(0.06 * 64)) // 2
        assert mask.keep[:, lo:lo + int(0.06 * 64)].all()
    m2 = make_mask("gaussian2d", 64, 64, 4, 0.04, Rng(1))
    side = int(round(np.sqrt(0.04 * 64 * 64)))
    lo = (64 - side) // 2
    assert m2.keep[lo:lo + side, lo:lo + side].all()
    mp = make_mask("poisson_vd", 64, 64, 4, 0.04, Rng(1))
    yy, xx = np.mgrid[0:64, 0:64]
    r_acs = np.sqrt(0.04 * 64 * 64 / np.pi)
    disc = np.hypot(yy - 31.5, xx - 31.5) <= r_acs
    assert mp.keep[disc].all()


def test_1d_masks_constant_along_readout():
    mask = make_mask("gaussian1d", 48, 64, 4, 0.05, Rng(2))
    assert (mask.keep == mask.keep[0]).all()


def test_infeasible_budget_raises():
    with pytest.raises(ConfigurationError):
        make_mask("uniform1d", 64, 64, 16, 0.5, Rng(0))
    with pytest.raises(ConfigurationError):
        make_mask("gaussian2d", 64, 64, 16, 0.4, Rng(0))


def test_unknown_kind_and_bad_params():
    with pytest.raises(ConfigurationError):
        make_mask("radial", 64, 64, 4, 0, Rng(0))
    with pytest.raises(ConfigurationError):
        make_mask("uniform1d", 64, 64, 0.5, 0, Rng(0))


def test_mask_determinism():
    a = make_mask("poisson_vd", 64, 64, 8, 0.02, Rng(9))
    b = make_mask("poisson_vd", 64, 64, 8, 0.02, Rng(9))
    assert np.array_equal(a.keep, b.keep)


# ---------------------------------------------------------------------------
# sensitivities


def test_normalize_single_constant_coil():
    maps = SensitivityMaps(np.full((1, 8, 8), 0.7, dtype=complex))
    out = normalize_sensitivities(maps)
    assert np.allclose(out.maps, 1.0)


def test_normalize_four_random_smooth_coils():
    maps = simulate_sensitivities(4, 32, 32, Rng(3))
    total = np.sum(np.abs(maps.maps) ** 2, axis=0)
    assert np.max(np.abs(total - 1.0)) <= 1e-6


def test_normalize_preserves_phase():
    g = Rng(4).generator()
    stack = (g.standard_normal((3, 8, 8)) + 1j * g.standard_normal((3, 8, 8))) + 2.0
    out = normalize_sensitivities(SensitivityMaps(stack))
    assert np.allclose(np.angle(out.maps), np.angle(stack))


def test_normalize_degenerate_pixel_raises():
    stack = np.ones((2, 4, 4), dtype=complex)
    stack[:, 1, 2] = 0.0
    with pytest.raises(DegeneratePixelError):
        normalize_sensitivities(SensitivityMaps(stack))


def test_normalize_outside_support_zeroed():
    stack = np.ones((2, 4, 4), dtype=complex)
    stack[:, 1, 2] = 0.0
    support = np.ones((4, 4), bool)
    support[1, 2] = False
    out = normalize_sensitivities(SensitivityMaps(stack, support))
    assert np.all(out.maps[:, 1, 2] == 0)
    on = np.sum(np.abs(out.maps) ** 2, axis=0)[support]
    assert np.allclose(on, 1.0)


def test_simulate_single_coil_identity():
    maps = simulate_sensitivities(1, 16, 16, Rng(5))
    assert np.allclose(maps.maps, 1.0)


def test_simulate_deterministic():
    a = simulate_sensitivities(8, 32, 32, Rng(6))
    b = simulate_sensitivities(8, 32, 32, Rng(6))
    assert np.array_equal(a.maps, b.maps)


# ---------------------------------------------------------------------------
# forward model


def _rand_image(g, n=32):
    return g.standard_normal((n, n)) + 1j * g.standard_normal((n, n))


def test_forward_full_mask_single_coil_preserves_norm():
    g = Rng(7).generator()
    x = _rand_image(g)
    mask = make_mask("full", 32, 32, 1, 0)
    y = forward(x, mask)
    assert abs(np.linalg.norm(y.data) - np.linalg.norm(x)) <= 1e-6 * np.linalg.norm(x)


@pytest.mark.parametrize("kind", ["uniform1d", "gaussian1d", "gaussian2d", "poisson_vd"])
@pytest.mark.parametrize("coils", [1, 4, 8])
def test_adjoint_dot_test_all_kinds_and_coils(kind, coils):
    g = Rng(hash((kind, coils)) % 2**31).generator()
    mask = make_mask(kind, 32, 32, 4, 0.06, Rng(8))
    maps = None if coils == 1 else simulate_sensitivities(coils, 32, 32, Rng(9))
    x = _rand_image(g)
    y = (g.standard_normal((coils, 32, 32)) + 1j * g.standard_normal((coils, 32, 32)))
    y = y * mask.keep
    Ax = forward(x, mask, maps).data
    Aty = adjoint(MultiCoilKspace(y, mask), maps)
    lhs = np.vdot(Ax, y)
    rhs = np.vdot(x, Aty)
    assert abs(lhs - rhs) <= 1e-6 * np.linalg.norm(x) * np.linalg.norm(y)


def test_forward_then_adjoint_identity_on_mask_support():
    # A A* y = y for y supported on the mask (single coil)
    g = Rng(10).generator()
    mask = make_mask("gaussian2d", 32, 32, 4, 0.04, Rng(11))
    y = (g.standard_normal((1, 32, 32)) + 1j * g.standard_normal((1, 32, 32))) * mask.keep
    ksp = MultiCoilKspace(y, mask)
    again = forward(adjoint(ksp), mask).data
    assert np.max(np.abs(again - y)) <= 1e-10


def test_adjoint_full_mask_recovers_image():
    g = Rng(12).generator()
    x = _rand_image(g)
    mask = make_mask("full", 32, 32, 1, 0)
    y = forward(x, mask)
    assert np.max(np.abs(adjoint(y) - x)) <= 1e-6


def test_adjoint_zero_is_zero():
    mask = make_mask("full", 16, 16, 1, 0)
    y = MultiCoilKspace(np.zeros((1, 16, 16), complex), mask)
    assert np.all(adjoint(y) == 0)


def test_forward_shape_mismatch():
    mask = make_mask("full", 16, 16, 1, 0)
    with pytest.raises(ShapeMismatchError):
        forward(np.zeros((8, 8), complex), mask)


# ---------------------------------------------------------------------------
# data consistency


def test_dc_lambda_zero_is_identity():
    g = Rng(13).generator()
    x = _rand_image(g)
    mask = make_mask("uniform1d", 32, 32, 4, 0.06, Rng(14))
    y = forward(_rand_image(g), mask)
    assert np.allclose(data_consistency(x, y, None, 0.0), x)


def test_dc_lambda_one_exact_replacement():
    g = Rng(15).generator()
    x_true, x = _rand_image(g), _rand_image(g)
    mask = make_mask("gaussian1d", 32, 32, 4, 0.06, Rng(16))
    y = forward(x_true, mask)
    out = data_consistency(x, y, None, 1.0)
    resid = np.linalg.norm(mask.keep * dft2c(out) - y.data[0])
    assert resid <= 1e-5 * np.linalg.norm(y.data)


def test_dc_half_lambda_halves_residual():
    g = Rng(17).generator()
    x_true, x = _rand_image(g), _rand_image(g)
    mask = make_mask("gaussian2d", 32, 32, 8, 0.03, Rng(18))
    y = forward(x_true, mask)
    out = data_consistency(x, y, None, 0.5)
    r_in = np.linalg.norm(forward(x, mask).data - y.data)
    r_out = np.linalg.norm(forward(out, mask).data - y.data)
    assert abs(r_out / r_in - 0.5) <= 1e-6


def test_dc_idempotent_at_lambda_one():
    g = Rng(19).generator()
    x = _rand_image(g)
    mask = make_mask("uniform1d", 32, 32, 2, 0.0, Rng(20))
    y = forward(_rand_image(g), mask)
    once = data_consistency(x, y, None, 1.0)
    twice = data_consistency(once, y, None, 1.0)
    assert np.max(np.abs(twice - once)) <= 1e-6


def test_dc_residual_never_grows():
    g = Rng(21).generator()
    mask = make_mask("gaussian1d", 32, 32, 4, 0.05, Rng(22))
    maps = simulate_sensitivities(4, 32, 32, Rng(23))
    y = forward(_rand_image(g), mask, maps)
    for lam in (0.0, 0.3, 0.7, 1.0):
        x = _rand_image(g)
        out = data_consistency(x, y, maps, lam)
        r_in = np.linalg.norm(forward(x, mask, maps).data - y.data)
        r_out = np.linalg.norm(forward(out, mask, maps).data - y.data)
        assert r_out <= r_in + 1e-9


def test_dc_rejects_bad_lambda():
    mask = make_mask("full", 16, 16, 1, 0)
    y = forward(np.zeros((16, 16), complex), mask)
    with pytest.raises(ParameterError):
        data_consistency(np.zeros((16, 16)), y, None, 1.5)
    with pytest.raises(ParameterError):
        data_consistency(np.zeros((16, 16)), y, None, -0.1)


# ---------------------------------------------------------------------------
# non-expansiveness


def test_nonexpansive_identity_at_lambda_zero():
    mask = make_mask("gaussian1d", 32, 32, 4, 0.05, Rng(24))
    assert nonexpansive_bound(mask, None, 0.0, rng=Rng(25)) == pytest.approx(1.0, abs=1e-9)


def test_nonexpansive_single_coil_lambda_one():
    mask = make_mask("poisson_vd", 32, 32, 4, 0.03, Rng(26))
    assert nonexpansive_bound(mask, None, 1.0, rng=Rng(27)) <= 1 + 1e-6


def test_nonexpansive_eight_coils_lambda_one():
    mask = make_mask("gaussian2d", 32, 32, 8, 0.03, Rng(28))
    maps = simulate_sensitivities(8, 32, 32, Rng(29))
    assert nonexpansive_bound(mask, maps, 1.0, rng=Rng(30)) <= 1 + 1e-6


# ---------------------------------------------------------------------------
# phantom


def test_phantom_real_when_phase_none():
    ph = shepp_logan(64, 64)
    assert np.all(ph.imag == 0)


def test_phantom_smooth_phase_preserves_magnitude():
    a = shepp_logan(64, 64)
    b = shepp_logan(64, 64, "smooth")
    assert np.max(np.abs(np.abs(b) - np.abs(a))) <= 1e-6
    assert np.max(np.abs(b.imag)) > 0


def test_phantom_intensity_range_and_background():
    ph = np.real(shepp_logan(128, 128))
    assert 0.9 <= ph.max() <= 1.0
    assert ph.min() == 0.0
    assert ph[0, 0] == 0.0 and ph[-1, -1] == 0.0  # corners outside the head


def test_phantom_rejects_tiny_grid():
    from mrisde.errors import SizeError

    with pytest.raises(SizeError):
        shepp_logan(16, 16)


def test_random_ellipses_range_and_determinism():
    a = random_ellipses(32, 32, Rng(31))
    b = random_ellipses(32, 32, Rng(31))
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
