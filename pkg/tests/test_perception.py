import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusnav import autodiff as ad
from focusnav.autodiff import Tensor
from focusnav.autodiff.gradcheck import check_gradients
from focusnav.perception import (
    BevEncoder,
    GridSpec,
    TraversabilityDecoder,
    collate,
    loss_traversability,
    patch_centers,
    patchify,
    voxelize,
)

# binary-exact cell sizes make one-cell shifts exact in floating point
SPEC = GridSpec(depth=4, size=16, cell=0.125, z_cell=0.5, z_min=-1.0, max_points=16)


def encoder(seed=0, spec=SPEC):
    return BevEncoder(spec, 8, 4, 6, np.random.default_rng(seed))


def cloud(rng, n=300, spec=SPEC):
    half = spec.extent / 2
    return np.column_stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n),
                            rng.uniform(spec.z_min, spec.z_min + spec.depth * spec.z_cell, n)])


# -- voxelization ------------------------------------------------------------------

def test_point_at_voxel_centre_has_zero_offset():
    c = [SPEC.xy_min + 3.5 * SPEC.cell, SPEC.xy_min + 7.5 * SPEC.cell, SPEC.z_min + 1.5 * SPEC.z_cell]
    g = voxelize(np.array([c]), SPEC)
    assert len(g) == 1
    np.testing.assert_array_equal(g.coords[0], [1, 3, 7])
    np.testing.assert_allclose(g.features[0, 0, :3], 0.0, atol=1e-15)
    assert g.features[0, 0, 3] == c[2]


def test_two_points_share_a_voxel():
    g = voxelize(np.array([[0.01, 0.01, 0.1], [0.02, 0.03, 0.2]]), SPEC)
    assert len(g) == 1 and g.mask[0].sum() == 2 and g.counts[0] == 2


def test_points_outside_are_dropped_and_counted():
    g = voxelize(np.array([[5.0, 0, 0], [0, 0, 9.0], [0.01, 0.01, 0.0]]), SPEC)
    assert g.dropped == 2 and len(g) == 1


def test_voxel_cap_uses_stride_subsampling():
    pts = np.column_stack([np.linspace(0.001, 0.1, 40), np.full(40, 0.01), np.full(40, 0.1)])
    g = voxelize(pts, SPEC)
    assert g.counts[0] == 40 and g.mask[0].sum() == 16
    x0 = SPEC.xy_min + 8.5 * SPEC.cell
    picked = g.features[0, :, 0] + x0
    np.testing.assert_allclose(picked, pts[(np.arange(16) * 40) // 16, 0], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_every_inside_point_lands_in_exactly_one_voxel(seed):
    rng = np.random.default_rng(seed)
    pts = cloud(rng, 200) * 1.3
    g = voxelize(pts, SPEC)
    assert g.counts.sum() + g.dropped == len(pts)
    assert len(np.unique(g.flat_index)) == len(g)


# -- BEV encoder -------------------------------------------------------------------

def test_empty_grid_gives_constant_bev():
    enc = encoder()
    for p in enc.parameters():
        if p.data.ndim == 1:
            p.data = np.random.default_rng(1).normal(size=p.data.shape)
    bev = enc(collate([voxelize(np.zeros((0, 3)), SPEC)], SPEC)).data
    assert bev.shape == (1, 6, 16, 16)
    interior = bev[:, :, 3:-3, 3:-3]
    np.testing.assert_allclose(interior, interior[:, :, :1, :1] * np.ones_like(interior), atol=1e-12)


def test_one_cell_shift_moves_the_interior():
    rng = np.random.default_rng(2)
    pts = cloud(rng, 400)
    enc = encoder(3)
    a = enc(collate([voxelize(pts, SPEC)], SPEC)).data
    b = enc(collate([voxelize(pts + [SPEC.cell, 0.0, 0.0], SPEC)], SPEC)).data
    m = 5  # receptive-field margin from the borders
    np.testing.assert_allclose(b[:, :, m + 1:-m, m:-m], a[:, :, m:-m - 1, m:-m], atol=1e-12)


def test_point_order_within_voxels_does_not_matter():
    rng = np.random.default_rng(4)
    pts = cloud(rng, 300) * 0.3  # crowd the voxels
    enc = encoder(5)
    a = enc(collate([voxelize(pts, SPEC)], SPEC)).data
    # reversing keeps every voxel under the cap with the same point set
    g = voxelize(pts[::-1], SPEC)
    assert (g.counts <= SPEC.max_points).all()
    b = enc(collate([g], SPEC)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    spec = GridSpec(depth=2, size=8, cell=0.25, z_cell=1.0, z_min=-1.0, max_points=4)
    enc = BevEncoder(spec, 4, 3, 4, rng)
    vox = collate([voxelize(cloud(rng, 60, spec), spec), voxelize(cloud(rng, 40, spec), spec)], spec)
    w = rng.normal(size=(2, 4, 8, 8))
    # zero biases put empty cells exactly on the ReLU kink, where central differences are meaningless
    for p in enc.parameters():
        if p.data.ndim == 1:
            p.data = rng.normal(scale=0.3, size=p.data.shape)

    def loss():
        return (enc(vox) * Tensor(w)).sum()

    err = check_gradients(loss, enc.parameters(), max_entries=12, rng=np.random.default_rng(0))
    assert err <= 1e-4


# -- decoder and loss ---------------------------------------------------------------

def test_zero_bev_decodes_to_one_half():
    dec = TraversabilityDecoder(6, np.random.default_rng(0))
    out = dec(Tensor(np.zeros((2, 6, 16, 16)))).data
    np.testing.assert_array_equal(out, 0.5)


def test_decoder_output_inside_unit_interval():
    dec = TraversabilityDecoder(6, np.random.default_rng(1))
    out = dec(Tensor(np.random.default_rng(2).normal(size=(1, 6, 16, 16)))).data
    assert ((out > 0) & (out < 1)).all()


def test_bce_closed_form_values():
    assert loss_traversability(Tensor(np.full((1, 4, 4), 0.5)), np.ones((1, 4, 4))).item() == \
        pytest.approx(math.log(2), abs=1e-12)
    assert loss_traversability(Tensor(np.array([[[0.25]]])), np.ones((1, 1, 1))).item() == \
        pytest.approx(math.log(4), abs=1e-12)
    truth = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert loss_traversability(Tensor(truth), truth).item() <= 1e-6


def test_bce_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_traversability(Tensor(np.full((1, 4, 4), 0.5)), np.ones((1, 4, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_bce_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, size=(1, 5, 5))
    t = (rng.uniform(size=(1, 5, 5)) > 0.5).astype(float)
    assert loss_traversability(Tensor(p), t).item() >= 0.0


# -- patches ------------------------------------------------------------------------

def test_patch_tokens_follow_patch_centres():
    spec = GridSpec(depth=2, size=8, cell=0.5)
    bev = np.zeros((1, 1, 8, 8))
    bev[0, 0, 6, 1] = 1.0  # forward, right of the robot
    tok = patchify(Tensor(bev), 4).data[0]
    k = int(np.argmax(tok.sum(axis=1)))
    centre = patch_centers(spec, 4)[k]
    assert centre[0] > 0 and centre[1] < 0
    np.testing.assert_allclose(patch_centers(spec, 4), [[-1, -1], [-1, 1], [1, -1], [1, 1]])
