import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from empinn.diffcore import ConfigurationError
from empinn.reference import (
    AllenCahnGridSpec,
    UndefinedMetricError,
    exact_advection,
    exact_helmholtz,
    read_grid,
    read_grid_raw,
    reference_grid,
    relative_l2,
    solve_allen_cahn_reference,
    write_grid,
)


def test_relative_l2_basics():
    u = np.array([1.0, 2.0, 2.0])
    assert relative_l2(u, u) == 0.0
    assert relative_l2(np.zeros(3), u) == 1.0
    with pytest.raises(UndefinedMetricError):
        relative_l2(u, np.zeros(3))
    with pytest.raises(ConfigurationError):
        relative_l2(u, np.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_relative_l2_scale_and_permutation_invariant(c, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 50))
    base = relative_l2(a, b)
    assert relative_l2(c * a, c * b) == pytest.approx(base, rel=1e-12)
    perm = rng.permutation(50)
    assert relative_l2(a[perm], b[perm]) == pytest.approx(base, rel=1e-12)


def test_exact_solutions():
    assert exact_helmholtz(0.5, 0.125) == pytest.approx(1.0)
    t, x = 0.013, 2.1
    assert exact_advection(t, x) == pytest.approx(np.sin(x - 100 * t), abs=1e-12)


def test_allen_cahn_small_grid_properties():
    spec = AllenCahnGridSpec(n_modes=256, dt=1e-3, n_t=11, n_x=65)
    grid = solve_allen_cahn_reference(spec)
    t, x = grid.axes
    assert grid.u_ref.shape == (11, 65)
    assert np.max(np.abs(grid.u_ref[0] - x**2 * np.cos(np.pi * x))) <= 1e-12
    assert np.array_equal(grid.u_ref[:, 0], grid.u_ref[:, -1])
    assert np.all(np.abs(grid.u_ref) <= 1.0 + 1e-6)


def test_allen_cahn_spec_validation():
    with pytest.raises(ConfigurationError):
        AllenCahnGridSpec(n_modes=1000)
    with pytest.raises(ConfigurationError):
        AllenCahnGridSpec(n_modes=256, n_x=100)
    with pytest.raises(ConfigurationError):
        AllenCahnGridSpec(dt=3e-3)


def test_grid_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    axes = (np.linspace(0, 1, 4), np.linspace(-1, 1, 3))
    values = rng.standard_normal((4, 3))
    path = tmp_path / "g.grid"
    write_grid(path, axes, values)
    back_axes, back = read_grid_raw(path)
    assert np.array_equal(back, values)
    assert all(np.array_equal(a, b) for a, b in zip(axes, back_axes))
    assert path.read_text().splitlines()[0] == "4,3"


def test_grid_shape_mismatch(tmp_path):
    with pytest.raises(ConfigurationError):
        write_grid(tmp_path / "g", (np.arange(3), np.arange(2)), np.zeros((2, 3)))


def test_reference_import_hook(tmp_path):
    grid = reference_grid("helmholtz", shape=(5, 7))
    path = tmp_path / "h.grid"
    write_grid(path, grid.axes, grid.u_ref)
    loaded = reference_grid("helmholtz", reference_path=path)
    assert np.array_equal(loaded.u_ref, grid.u_ref)
    assert read_grid(path, "advection").norm_mask[:, -1].sum() == 0


def test_default_grids():
    assert reference_grid("helmholtz").u_ref.shape == (101, 101)
    adv = reference_grid("advection")
    assert adv.u_ref.shape == (201, 257) and not adv.norm_mask[:, -1].any()
    with pytest.raises(ConfigurationError):
        reference_grid("burgers")
