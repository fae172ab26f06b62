import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualerase.errors import (
    AllBackgroundError,
    AllForegroundError,
    MissingAlphaError,
    NotPerfectSquareError,
    UpscaleRequestedError,
)
from dualerase.masks import (
    AttentionKind,
    ForegroundMask,
    MaskSource,
    build_attention_mask,
    downscale_mask,
    extract_foreground_mask,
    load_mask,
    save_mask,
)


def test_alpha_plane_is_the_mask():
    rng = np.random.default_rng(0)
    alpha = (rng.uniform(size=(6, 5)) > 0.5).astype(float)
    alpha[0, 0], alpha[0, 1] = 0, 1
    rgba = np.concatenate([rng.uniform(size=(6, 5, 3)), alpha[..., None]], axis=-1)
    mask = extract_foreground_mask(rgba)
    assert mask.source is MaskSource.ALPHA
    np.testing.assert_array_equal(mask.grid, alpha > 0.5)


def test_uniform_image_has_no_foreground():
    with pytest.raises(AllBackgroundError):
        extract_foreground_mask(np.full((8, 8, 3), 0.3), policy="color")


def test_red_block_on_white():
    img = np.ones((4, 4, 3))
    img[1:3, 1:3] = (1.0, 0.0, 0.0)
    mask = extract_foreground_mask(img, policy="color", tolerance=0.1)
    expected = np.zeros((4, 4), dtype=np.uint8)
    expected[1:3, 1:3] = 1
    np.testing.assert_array_equal(mask.grid, expected)
    assert mask.source is MaskSource.COLOR


def test_alpha_policy_needs_alpha():
    img = np.ones((4, 4, 3))
    img[0, 0] = 0
    with pytest.raises(MissingAlphaError):
        extract_foreground_mask(img, policy="alpha")


def test_all_foreground_alpha_rejected():
    rgba = np.ones((4, 4, 4))
    with pytest.raises(AllForegroundError):
        extract_foreground_mask(rgba)


def test_mask_same_size_as_image():
    img = np.ones((7, 9, 3))
    img[2:4, 3:6] = 0
    assert extract_foreground_mask(img).shape == (7, 9)


def test_downscale_examples():
    np.testing.assert_array_equal(downscale_mask(np.ones((4, 4)), 4), np.ones((2, 2)))
    left = np.zeros((4, 4))
    left[:, :2] = 1
    np.testing.assert_array_equal(downscale_mask(ForegroundMask(left), 4), [[1, 0], [1, 0]])
    small = ForegroundMask(np.array([[1, 0], [0, 0]]))
    np.testing.assert_array_equal(downscale_mask(small, 4), [[1, 0], [0, 0]])


def test_downscale_tie_goes_to_foreground():
    grid = np.zeros((2, 4))
    grid[0, :] = 1  # each 2x2 output cell is exactly half covered
    np.testing.assert_array_equal(downscale_mask(grid, 1), [[1]])
    np.testing.assert_array_equal(downscale_mask(np.array([[1, 0], [0, 0], [0, 0]]), 1), [[0]])


def test_downscale_non_integer_ratio():
    # 3x3 -> 2x2: output cell (0,0) takes pixel (0,0) with weight 4/9,
    # (0,1) and (1,0) with 2/9 each, (1,1) with 1/9
    grid = np.zeros((3, 3))
    grid[0, 1] = 1
    grid[1, 1] = 1
    # 2/9 + 1/9 < 0.5 for cells (0,0) and (0,1) alike
    np.testing.assert_array_equal(downscale_mask(grid, 4), [[0, 0], [0, 0]])
    grid[1, 1] = 0
    grid[0, 0] = 1
    # 4/9 + 2/9 for cell (0,0)
    assert downscale_mask(grid, 4)[0, 0] == 1


def test_downscale_errors():
    with pytest.raises(NotPerfectSquareError):
        downscale_mask(np.ones((4, 4)), 3)
    with pytest.raises(UpscaleRequestedError):
        downscale_mask(np.ones((4, 4)), 25)


def test_build_examples():
    m = build_attention_mask(np.ones((4, 4)), 4, AttentionKind.SELF)
    np.testing.assert_array_equal(m.grid, np.ones((4, 4)))
    corner = ForegroundMask(np.array([[1, 0], [0, 0]]))
    m = build_attention_mask(corner, 4, "self")
    np.testing.assert_array_equal(m.grid, np.tile([1, 0, 0, 0], (4, 1)))
    m = build_attention_mask(corner, 4, "multi_view", n_v=2)
    np.testing.assert_array_equal(m.grid, np.tile([1, 0, 0, 0, 1, 0, 0, 0], (4, 1)))
    assert (m.k, m.D, m.kind) == (2, 4, AttentionKind.MULTI_VIEW)


def test_cross_domain_tiles_by_domains():
    corner = ForegroundMask(np.array([[0, 1], [0, 0]]))
    m = build_attention_mask(corner, 4, "cross_domain", n_v=4, n_d=3)
    assert m.grid.shape == (4, 12)


def test_mask_grid_is_read_only():
    m = build_attention_mask(np.ones((4, 4)), 4)
    with pytest.raises(ValueError):
        m.grid[0, 0] = 0


masks_2d = arrays(np.uint8, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(masks_2d, st.integers(1, 2), st.sampled_from(list(AttentionKind)), st.integers(1, 4), st.integers(1, 3))
def test_rows_identical_and_columns_follow_flat_mask(grid, side, kind, n_v, n_d):
    D = side * side
    m = build_attention_mask(grid, D, kind, n_v, n_d)
    flat = downscale_mask(grid, D).reshape(-1)
    assert (m.grid == m.grid[0]).all()
    cols = np.arange(m.grid.shape[1])
    np.testing.assert_array_equal(m.grid.sum(axis=0), D * flat[cols % D])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0.01, 1.0)))
def test_all_ones_self_mask_is_identity_on_row_stochastic(raw):
    m = raw / raw.sum(axis=1, keepdims=True)
    mask = build_attention_mask(np.ones((4, 4)), 16 // 4, "self")
    np.testing.assert_array_equal(mask.grid * m[:, :4], m[:, :4])


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (3, 3), elements=st.integers(0, 1)))
def test_downscale_idempotent_at_target_size(grid):
    once = downscale_mask(grid, 9)
    np.testing.assert_array_equal(downscale_mask(once, 9), once)
    np.testing.assert_array_equal(once, grid)


def test_mask_file_roundtrip(tmp_path):
    grid = np.zeros((5, 6), dtype=np.uint8)
    grid[1:3, 2:5] = 1
    path = tmp_path / "mask.png"
    save_mask(ForegroundMask(grid), path)
    loaded = load_mask(path)
    np.testing.assert_array_equal(loaded.grid, grid)
    assert loaded.source is MaskSource.FILE
