import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from dtpdt import synth
from dtpdt.synth import SynthParams, TreeError


def cube(n, size, lo=None):
    m = np.zeros((size,) * 3)
    lo = (size - n) // 2 if lo is None else lo
    m[lo:lo + n, lo:lo + n, lo:lo + n] = 1
    return m


# --- tree generation --------------------------------------------------------

@pytest.mark.parametrize("gens, count", [(1, 1), (3, 7), (5, 31)])
def test_branch_count(gens, count):
    b = synth.generate_fitting(SynthParams(seed=1, generations=gens))
    assert len(b.tree) == count


def test_single_generation_is_a_straight_tube():
    br = synth.generate_fitting(SynthParams(seed=3, generations=1)).tree.branches[0]
    d = np.diff(br.polyline, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.allclose(d, d[0])


def test_determinism_by_seed():
    a = synth.generate_tree(SynthParams(seed=7))
    b = synth.generate_tree(SynthParams(seed=7))
    c = synth.generate_tree(SynthParams(seed=8))
    assert a.mask.checksum() == b.mask.checksum()
    assert a.dc_map.checksum() == b.dc_map.checksum()
    assert a.mask.checksum() != c.mask.checksum()


def test_escape_names_generation():
    with pytest.raises(TreeError, match=r"generation \d+"):
        synth.generate_tree(SynthParams(seed=0, dims=(16, 16, 16), generations=4, root_length=12))


def test_invalid_params():
    with pytest.raises(TreeError):
        SynthParams(radius_decay=1.0)
    with pytest.raises(TreeError):
        SynthParams(generations=0)


def test_tree_invariants(bundles):
    for b in bundles:
        ids = [br.id for br in b.tree.branches]
        assert len(set(ids)) == len(ids)
        for br in b.tree.branches:
            assert br.radius_start > 0 and br.radius_end > 0
            assert br.radius_end <= br.radius_start
            if br.parent_id != synth.ROOT:
                parent = b.tree.by_id(br.parent_id)
                assert np.allclose(br.polyline[0], parent.polyline[-1])
                assert br.radius_start <= parent.radius_end + 1e-12


def test_fits_with_margin(bundles):
    for b in bundles:
        fg = np.argwhere(b.mask.data > 0)
        assert fg.min() >= synth.MARGIN - 1
        assert np.all(fg.max(axis=0) <= np.array(b.mask.dims) - synth.MARGIN)


def test_leaf_radius():
    p = SynthParams(seed=2, generations=4)
    b = synth.generate_fitting(p)
    for leaf in b.tree.leaves():
        assert leaf.radius_start == pytest.approx(p.root_radius * p.radius_decay ** (p.generations - 1))


def test_bundle_invariants(bundles):
    for b in bundles:
        mask, dc, cl = b.mask.data > 0, b.dc_map.data, b.centerline_mask.data > 0
        assert np.all(cl <= mask)
        assert np.all(dc[~mask] == 0)
        assert np.array_equal(dc[mask] == 0, cl[mask])
        assert np.all(dc <= b.dc_max + 1e-9)
        labels = b.branch_labels.data
        assert np.all(labels[mask] >= 0) and np.all(labels[~mask] == -1)


def test_mask_matches_capsule_definition(small_bundle):
    """Brute force: voxel is inside iff within the local radius of some segment."""
    a, b, ra, rb, _ = synth._segments(small_bundle.tree)
    dims = small_bundle.mask.dims
    grid = np.indices(dims).reshape(3, -1).T.astype(float)
    inside = np.zeros(len(grid), dtype=bool)
    for p, q, r0, r1 in zip(a, b, ra, rb):
        d = q - p
        t = np.clip(((grid - p) @ d) / (d @ d), 0, 1)
        dist = np.linalg.norm(grid - (p + t[:, None] * d), axis=1)
        inside |= dist <= r0 + t * (r1 - r0)
    expect = inside.reshape(dims) | (small_bundle.centerline_mask.data > 0)
    assert np.array_equal(expect, small_bundle.mask.data > 0)


def test_tree_json_roundtrip(small_bundle):
    t = synth.AirwayTree.from_json(small_bundle.tree.to_json())
    assert len(t) == len(small_bundle.tree)
    for x, y in zip(t.branches, small_bundle.tree.branches):
        assert np.allclose(x.polyline, y.polyline) and x.radius_end == y.radius_end


def test_bundle_save_load(tmp_path, small_bundle):
    img = synth.synth_ct(small_bundle, seed=1)
    synth.save_bundle(small_bundle, tmp_path, "t", img)
    b, im = synth.load_bundle(tmp_path, "t")
    assert b.mask == small_bundle.mask and b.dc_map == small_bundle.dc_map
    assert b.dc_max == small_bundle.dc_max and im == img
    assert b.params == small_bundle.params


def test_synth_ct_contrast(bundles):
    b = bundles[0]
    ct = synth.synth_ct(b, seed=0, noise_hu=0.0).data
    m = b.mask.data > 0
    trunk = synth.centerline_voxels(b.tree.branches[0])
    wall = synth.hard_dilate(m) & ~m
    # thick lumen reads as air; the blurred wall is brighter than parenchyma
    assert ct[tuple(trunk.T)].mean() < -850
    assert ct[wall].mean() > -850
    x = synth.network_input(synth.synth_ct(b, seed=0))
    assert 0 <= x.min() and x.max() <= 1


# --- hard morphology and exact EDT ------------------------------------------

def test_hard_boundary_examples():
    b = synth.hard_boundary(cube(3, 7)).data
    assert b.sum() == 26 and b[3, 3, 3] == 0
    single = np.zeros((5, 5, 5))
    single[2, 2, 2] = 1
    assert np.array_equal(synth.hard_boundary(single).data, single)
    full = synth.hard_boundary(np.ones((4, 5, 6))).data
    shell = np.ones((4, 5, 6))
    shell[1:-1, 1:-1, 1:-1] = 0
    assert np.array_equal(full, shell)


@given(arrays(np.bool_, (6, 6, 6)))
def test_boundary_properties(m):
    b = synth.hard_boundary(m).data > 0
    assert np.all(b <= m)
    assert not np.any(synth.hard_erode(m) & b)


def test_hard_erode_matches_scipy(rng):
    m = rng.random((9, 9, 9)) < 0.7
    ref = ndimage.binary_erosion(m, np.ones((3, 3, 3)), border_value=0)
    assert np.array_equal(synth.hard_erode(m), ref)


def test_edt_examples():
    single = np.zeros((3, 3, 3))
    single[1, 1, 1] = 1
    assert synth.exact_edt(single, single).data[1, 1, 1] == 0
    for n, nb, centre in [(3, 26, 1.0), (5, 98, 2.0)]:
        m = cube(n, n + 4)
        b = synth.hard_boundary(m).data
        assert b.sum() == nb
        c = (n + 4) // 2
        assert synth.exact_edt(m, b).data[c, c, c] == centre


def test_edt_matches_scipy(rng):
    m = ndimage.binary_dilation(rng.random((12, 12, 12)) < 0.05, iterations=2)
    b = synth.hard_boundary(m).data
    ref = ndimage.distance_transform_edt(b == 0)
    got = synth.exact_edt(m, b).data
    assert np.allclose(got[m], ref[m]) and np.all(got[~m] == 0)


def test_edt_axis_permutation_symmetry(rng):
    m = ndimage.binary_dilation(rng.random((8, 9, 10)) < 0.05, iterations=2)
    b = synth.hard_boundary(m).data
    d = synth.exact_edt(m, b).data
    perm = (2, 0, 1)
    dp = synth.exact_edt(m.transpose(perm), b.transpose(perm)).data
    assert np.allclose(dp, d.transpose(perm))


def test_edt_empty_boundary_raises():
    with pytest.raises(ValueError, match="boundary"):
        synth.exact_edt(np.ones((2, 2, 2)), np.zeros((2, 2, 2)))
