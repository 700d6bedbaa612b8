import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage as ndi

from medsnet.phantom import PhantomError, PhantomSpec, generate_phantom, lung_ellipsoid_mask

SMALL = dict(volume_shape=(24, 48, 48), spacing_mm=(1.0, 1.0, 1.0), nodule_diameter_range_mm=(3.0, 8.0))


def test_deterministic_per_seed():
    a, _ = generate_phantom(PhantomSpec(seed=7, n_nodules=3, **SMALL))
    b, _ = generate_phantom(PhantomSpec(seed=7, n_nodules=3, **SMALL))
    assert np.array_equal(a.voxels, b.voxels)
    c, _ = generate_phantom(PhantomSpec(seed=8, n_nodules=3, **SMALL))
    assert not np.array_equal(a.voxels, c.voxels)


def test_no_nodules():
    _, anns = generate_phantom(PhantomSpec(seed=1, n_nodules=0, **SMALL))
    assert anns == []


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(nodule_diameter_range_mm=(2.0, 10.0))
    with pytest.raises(ValueError):
        PhantomSpec(nodule_diameter_range_mm=(5.0, 31.0))
    with pytest.raises(ValueError):
        PhantomSpec(volume_shape=(4, 32, 32))


def test_placement_failure():
    with pytest.raises(PhantomError, match="could not place"):
        generate_phantom(PhantomSpec(seed=0, volume_shape=(8, 16, 16), n_nodules=5,
                                     nodule_diameter_range_mm=(20.0, 25.0), max_retries=20))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_geometric_audit(seed):
    spec = PhantomSpec(seed=seed, n_nodules=3, noise_sigma_hu=0.0, **SMALL)
    vol, anns = generate_phantom(spec)
    lungs = lung_ellipsoid_mask(spec)
    for a in anns:
        assert a.diameter_mm >= 3.0
        idx = tuple(np.rint(vol.world_to_voxel(a.center_zyx_mm)).astype(int))
        assert abs(float(vol.voxels[idx]) - spec.nodule_hu) <= 1
        assert lungs[idx]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_threshold_recovers_nodules(seed):
    spec = PhantomSpec(seed=seed, n_nodules=3, **SMALL)
    vol, anns = generate_phantom(spec)
    lungs = lung_ellipsoid_mask(spec)
    # bright voxels inside the lung region, grouped into 3D components
    bright = (vol.voxels > -400) & lungs
    labels, _ = ndi.label(bright, structure=np.ones((3, 3, 3)))
    for a in anns:
        idx = tuple(np.rint(vol.world_to_voxel(a.center_zyx_mm)).astype(int))
        assert labels[idx] > 0


def test_noise_level():
    spec = PhantomSpec(seed=2, n_nodules=0, n_vessels=0, noise_sigma_hu=20.0, **SMALL)
    vol, _ = generate_phantom(spec)
    interior = ndi.binary_erosion(lung_ellipsoid_mask(spec), iterations=2)
    vals = vol.voxels[interior].astype(float)
    assert abs(vals.mean() - spec.lung_hu) < 2.0
    assert 18.0 < vals.std() < 22.0


def test_vessels_elongate_under_projection():
    spec = PhantomSpec(seed=4, n_nodules=0, n_vessels=4, noise_sigma_hu=0.0, **SMALL)
    vol, _ = generate_phantom(spec)
    lungs = lung_ellipsoid_mask(spec)
    bright = (vol.voxels > -400) & lungs
    assert bright.any()
    # a vessel spans more slices than any nodule of the configured size range would
    zs = np.flatnonzero(bright.any(axis=(1, 2)))
    assert zs.max() - zs.min() + 1 > SMALL["nodule_diameter_range_mm"][1]
