import math

import numpy as np
import pytest

import oracles
from decaf import optics, phantom
from decaf.volume import Grid3D, PermittivityVolume

LAM, NA = 0.515, 0.65
K0 = 2 * math.pi / LAM
# Nyquist (pi/dx = 19.3 rad/um) lies beyond cutoff + |u_p| so every support is
# symmetric on the DFT grid.
G16 = Grid3D(16, 16, 2, 0.1625, 0.1625, 0.5, 0.0)


def test_pupil_examples():
    assert optics.pupil((0.0, 0.0), NA, LAM) == 1.0
    cut = NA * K0
    assert optics.pupil((1.001 * cut, 0.0), NA, LAM) == 0.0
    assert optics.pupil((cut, 0.0), NA, LAM) == 1.0
    # frozen from mpmath: 0.65 * 2 pi / 0.515
    assert cut == pytest.approx(7.93023388284802177, abs=1e-12)


def test_axial_wavevector_examples():
    assert optics.axial_wavevector((0.0, 0.0), K0) == K0
    assert optics.axial_wavevector((K0, 0.0), K0) == 0.0
    # frozen from mpmath: sqrt(12.2^2 - 7.93^2)
    assert optics.axial_wavevector((7.93, 0.0), 12.2) == pytest.approx(9.27119733367810482, abs=1e-12)
    with pytest.raises(ValueError):
        optics.axial_wavevector((12.3, 0.0), 12.2)


def test_source_and_setup_validation():
    with pytest.raises(ValueError):
        optics.IlluminationSource((K0 * 1.01, 0.0), LAM)
    with pytest.raises(ValueError):
        optics.IlluminationSource((0.0, 0.0), LAM, weight=0.0)
    src = [optics.IlluminationSource((0.0, 0.0), LAM)]
    with pytest.raises(ValueError):
        optics.OpticalSetup(1.2, LAM, 1.0, src)
    with pytest.raises(ValueError):
        optics.OpticalSetup(NA, LAM, 1.0, [])
    with pytest.raises(ValueError):
        optics.OpticalSetup(NA, LAM, 1.0, [optics.IlluminationSource((0.0, 0.0), 0.6)])


def _setup(sources, **kw):
    return optics.OpticalSetup(NA, LAM, 1.0, sources, **kw)


def test_phase_tf_normal_incidence_vanishes():
    s = optics.IlluminationSource((0.0, 0.0), LAM)
    h = optics.phase_tf(s, 0, G16.dz, G16, _setup([s]))
    assert np.all(h == 0)


def test_absorption_tf_sum_sign_normal_incidence():
    s = optics.IlluminationSource((0.0, 0.0), LAM)
    setup = _setup([s], absorption_sign="sum")
    h = optics.absorption_tf(s, 0, G16.dz, G16, setup)
    ux, uy = optics.frequency_grid(G16)
    r2 = ux ** 2 + uy ** 2
    inside = r2 <= setup.cutoff ** 2
    expected = np.where(inside, -K0 ** 2 / np.sqrt(np.where(inside, K0 ** 2 - r2, 1.0)), 0.0)
    np.testing.assert_allclose(h, expected, rtol=1e-13, atol=0)


@pytest.mark.parametrize("kind", ["ph", "ab"])
@pytest.mark.parametrize("options", [{}, {"absorption_sign": "sum", "phase_pupil": "u_p"}])
def test_tf_matches_scalar_oracle(kind, options):
    rng = np.random.default_rng(7)
    grid = Grid3D(12, 10, 3, 0.2, 0.3, 0.7, -0.4)
    for _ in range(4):
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(0, NA * K0)
        s = optics.IlluminationSource((rad * math.cos(ang), rad * math.sin(ang)), LAM, weight=rng.uniform(0.5, 2))
        setup = _setup([s], **options)
        q = int(rng.integers(3))
        fn = optics.phase_tf if kind == "ph" else optics.absorption_tf
        h = fn(s, q, grid.dz, grid, setup)
        z = grid.z0 + q * grid.dz
        kw = {"weight": s.weight, "phase_pupil": options.get("phase_pupil", "u"),
              "absorption_sign": 1.0 if options.get("absorption_sign") == "sum" else -1.0}
        ref = oracles.tf_arrays(kind, grid.nx, grid.ny, grid.dx, grid.dy, *s.u_p, z, LAM, NA, **kw)
        scale = np.abs(ref).max()
        assert np.abs(h - ref).max() <= 1e-12 * scale
        # five random frequencies checked one by one against the scalar formula
        for i, j in zip(rng.integers(grid.nx, size=5), rng.integers(grid.ny, size=5)):
            u = (oracles.dft_freq(i, grid.nx, grid.dx), oracles.dft_freq(j, grid.ny, grid.dy))
            val = oracles.scalar_tf(kind, *u, *s.u_p, z, LAM, NA, **kw)
            assert abs(h[i, j] - val) <= 1e-12 * max(scale, 1.0)


def test_tf_vanishes_outside_shifted_supports():
    s = optics.ring_sources(1, 30.0, LAM, 1.0)[0]
    setup = _setup([s])
    grid = Grid3D(32, 32, 1, 0.1, 0.1, 1.0)
    ux, uy = optics.frequency_grid(grid)
    cut = setup.cutoff
    outside = (np.hypot(ux - s.u_p[0], uy - s.u_p[1]) > cut) & (np.hypot(ux + s.u_p[0], uy + s.u_p[1]) > cut)
    assert outside.any()
    for fn in (optics.phase_tf, optics.absorption_tf):
        assert np.all(fn(s, 0, 1.0, grid, setup)[outside] == 0)


def test_stack_shapes(setups, desk_grid):
    stack = optics.build_tf_stack(setups["annular24"], desk_grid)
    assert stack.h_ph.shape == (24, 8, 64, 64) and stack.h_ab.shape == (24, 8, 64, 64)
    assert np.all(np.isfinite(stack.h_ph)) and np.all(np.isfinite(stack.h_ab))


def test_multiplexed_stack_is_sum_of_sources(setups):
    setup = setups["multiplexed16x6"]
    groups = setup.groups()
    assert len(groups) == 16 and all(len(g) == 6 for g in groups)
    members = [i for g in groups for i in g]
    assert len(set(members)) == 96
    stack = optics.build_tf_stack(setup, G16)
    single = optics.OpticalSetup(setup.na, setup.wavelength, setup.n0,
                                 [optics.IlluminationSource(s.u_p, s.wavelength) for s in setup.sources], "dense")
    per_source = optics.build_tf_stack(single, G16)
    for p, g in enumerate(groups):
        acc_ph = np.zeros_like(stack.h_ph[p])
        acc_ab = np.zeros_like(stack.h_ab[p])
        for i in g:
            acc_ph += per_source.h_ph[i]
            acc_ab += per_source.h_ab[i]
        assert np.array_equal(acc_ph, stack.h_ph[p]) and np.array_equal(acc_ab, stack.h_ab[p])


def test_single_group_multiplexed_equals_dense():
    s = optics.ring_sources(1, 20.0, LAM, 1.0)
    dense = optics.build_tf_stack(_setup(s, modality="dense"), G16)
    mult = optics.build_tf_stack(_setup(s, modality="multiplexed"), G16)
    assert np.array_equal(dense.h_ph, mult.h_ph) and np.array_equal(dense.h_ab, mult.h_ab)


def test_forward_zero_and_linearity(small_stack):
    rng = np.random.default_rng(3)
    zero = np.zeros((2,) + small_stack.h_ph.shape[1:])
    assert np.all(optics.apply_forward(small_stack, zero) == 0)
    x = rng.standard_normal(zero.shape)
    x2 = rng.standard_normal(zero.shape)
    y = optics.apply_forward(small_stack, x)
    np.testing.assert_allclose(optics.apply_forward(small_stack, 2.5 * x), 2.5 * y, rtol=0,
                               atol=1e-12 * np.abs(y).max())
    combo = optics.apply_forward(small_stack, 1.5 * x - 0.5 * x2)
    np.testing.assert_allclose(combo, 1.5 * y - 0.5 * optics.apply_forward(small_stack, x2), rtol=0,
                               atol=1e-12 * np.abs(combo).max())
    with pytest.raises(ValueError):
        optics.apply_forward(small_stack, zero[:, :1])


def test_forward_matches_brute_force_dft(setups):
    rng = np.random.default_rng(11)
    for name, setup in setups.items():
        stack = optics.build_tf_stack(setup, G16)
        x = rng.standard_normal((2, 2, 16, 16))
        ref = oracles.brute_forward(stack.h_ph, stack.h_ab, x)
        got = optics.apply_forward(stack, x)
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-10, name


def test_point_response_matches_scalar_oracle(annular):
    """Single voxel vs direct summation of the analytic TF from the scalar oracle."""
    stack = optics.build_tf_stack(annular, G16)
    x = np.zeros((2, 2, 16, 16))
    x[0, 1, 5, 9] = 1.0
    h_ph = np.zeros_like(stack.h_ph)
    h_ab = np.zeros_like(stack.h_ab)
    for p, s in enumerate(annular.sources):
        for q in range(2):
            z = G16.z0 + q * G16.dz
            h_ph[p, q] = oracles.tf_arrays("ph", 16, 16, G16.dx, G16.dy, *s.u_p, z, LAM, NA)
            h_ab[p, q] = oracles.tf_arrays("ab", 16, 16, G16.dx, G16.dy, *s.u_p, z, LAM, NA)
    ref = oracles.brute_forward(h_ph, h_ab, x)
    got = optics.forward(stack, PermittivityVolume(G16, x[0], x[1])).images
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-10


@pytest.mark.parametrize("name", phantom.PRESETS)
def test_adjoint_dot_product(setups, name):
    rng = np.random.default_rng(5)
    grid = Grid3D(32, 32, 4, 0.1625, 0.1625, 0.5, -0.75)
    stack = optics.build_tf_stack(setups[name], grid)
    for _ in range(3):
        x = rng.standard_normal((2, 4, 32, 32))
        y = rng.standard_normal((stack.n_measurements, 32, 32))
        ax = optics.apply_forward(stack, x)
        lhs = np.vdot(ax, y)
        rhs = np.vdot(x, optics.apply_adjoint(stack, y))
        assert abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)) <= 1e-10


def test_adjoint_zero_and_wrappers(small_stack):
    y = np.zeros((small_stack.n_measurements, 16, 16))
    vol = optics.adjoint(small_stack, optics.MeasurementSet(y))
    assert np.all(vol.re == 0) and np.all(vol.im == 0)


def test_adjoint_columns_match_explicit_matrix(annular):
    grid = Grid3D(8, 8, 2, 0.1625, 0.1625, 0.5, 0.0)
    stack = optics.build_tf_stack(annular, grid)
    a = oracles.explicit_matrix(lambda x: optics.apply_forward(stack, x), (2, 2, 8, 8))
    col_norms = np.sum(a * a, axis=0)
    for k in [0, 17, 130, 255]:
        e = np.zeros(256)
        e[k] = 1.0
        got = optics.apply_adjoint(stack, optics.apply_forward(stack, e.reshape(2, 2, 8, 8))).ravel()[k]
        assert got == pytest.approx(col_norms[k], rel=1e-10)
    # whole adjoint equals the transpose of the explicit matrix
    at = oracles.explicit_matrix(lambda y: optics.apply_adjoint(stack, y), (24, 8, 8))
    np.testing.assert_allclose(at, a.T, atol=1e-12 * np.abs(a).max())


@pytest.mark.parametrize("name", phantom.PRESETS)
def test_real_measurements_for_hermitian_options(name):
    """With the symmetric pupil factor and the summed absorption sign both TFs are
    Hermitian, so the inverse FFT of a real volume's prediction is real."""
    setup = phantom.make_setup(name, absorption_sign="sum", phase_pupil="u_p")
    stack = optics.build_tf_stack(setup, G16)
    x = np.random.default_rng(2).standard_normal((2, 2, 16, 16))
    assert optics.imaginary_residue(stack, x) <= 1e-12


def test_printed_tf_forms_are_not_hermitian(annular):
    """Documented behaviour of the printed forms: the P*(u) phase factor leaks
    into the imaginary part and the printed absorption TF is anti-Hermitian."""
    stack = optics.build_tf_stack(annular, G16)
    x = np.random.default_rng(2).standard_normal((2, 2, 16, 16))
    xr, xi = x.copy(), x.copy()
    xr[1] = 0
    xi[0] = 0
    assert optics.imaginary_residue(stack, xr) > 1e-3
    assert np.abs(optics.apply_forward(stack, xi)).max() <= 1e-12 * np.abs(optics.apply_forward(stack, xr)).max()


def test_resolution_limits_examples():
    mk = lambda na, lam, n0: optics.OpticalSetup(na, lam, n0, [optics.IlluminationSource((0.0, 0.0), lam)])
    lat, ax = optics.resolution_limits(mk(0.65, 0.515, 1.33))
    # frozen from mpmath evaluation of 4 NA / lambda and (2 n0 - 2 sqrt(n0^2 - NA^2)) / lambda
    assert lat == pytest.approx(5.04854368932038835, abs=1e-12)
    assert ax == pytest.approx(0.658855237480299142, abs=1e-12)
    assert optics.resolution_limits(mk(0.25, 0.632, 1.33))[0] == pytest.approx(1.58227848101265823, abs=1e-12)
    tiny = optics.resolution_limits(mk(1e-9, 0.515, 1.33))
    assert tiny[0] < 1e-8 and tiny[1] < 1e-8
    setup = mk(0.65, 0.515, 1.33)
    setup.na = 1.4
    with pytest.raises(ValueError):
        optics.resolution_limits(setup)


def test_ring_sources_geometry():
    src = optics.ring_sources(24, 40.0, LAM, 1.0)
    r = np.array([math.hypot(*s.u_p) for s in src])
    np.testing.assert_allclose(r, K0 * math.sin(math.radians(40.0)), rtol=1e-14)
    phi = np.unwrap([math.atan2(s.u_p[1], s.u_p[0]) for s in src])
    np.testing.assert_allclose(np.diff(phi), 2 * math.pi / 24, rtol=1e-12)


def test_with_groups_rejects_overlap():
    src = optics.ring_sources(4, 20.0, LAM, 1.0)
    with pytest.raises(ValueError):
        optics.with_groups(src, [[0, 1], [1, 2]])
    grouped = optics.with_groups(src, [[0, 2], [1, 3]])
    assert [s.group_id for s in grouped] == [0, 0, 1, 1]
