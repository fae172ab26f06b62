import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_chamfer, brute_ssim

from dualerase.errors import EmptyCloudError, ShapeMismatchError, TooSmallError
from dualerase.metrics import (
    CHAMFER_DEFINITION,
    SURROGATE_NAME,
    PointCloud,
    chamfer_distance,
    evaluate_views,
    load_point_cloud,
    perceptual_distance,
    register_perceptual_adapter,
    save_point_cloud,
    ssim,
    to_gray,
)


def test_ssim_self_is_one():
    x = np.random.default_rng(0).uniform(size=(32, 32))
    assert ssim(x, x) == 1.0


def test_ssim_black_vs_white():
    c1 = 1e-4
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b = rng.uniform(size=(2, 32, 32))
        assert ssim(a, b) == pytest.approx(brute_ssim(a, b), abs=1e-6)


def test_ssim_errors():
    with pytest.raises(ShapeMismatchError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(TooSmallError):
        ssim(np.zeros((10, 16)), np.zeros((10, 16)))


def test_ssim_color_uses_luma():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(to_gray(a), to_gray(b)))
    assert ssim(a.transpose(2, 0, 1), b.transpose(2, 0, 1)) == pytest.approx(ssim(a, b))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_bounded(seed):
    a, b = np.random.default_rng(seed).uniform(size=(2, 14, 15))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-9
    assert -1 <= s <= 1


def test_chamfer_examples():
    p = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_distance(p, p) == 0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(5):
        p, q = rng.normal(size=(50, 3)), rng.normal(size=(40, 3))
        assert chamfer_distance(p, q) == pytest.approx(brute_chamfer(p, q), abs=1e-9)


def test_chamfer_empty():
    with pytest.raises(EmptyCloudError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(EmptyCloudError):
        PointCloud(np.zeros((0, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_chamfer_symmetric_and_monotone_in_offset(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(15, 3)), rng.normal(size=(12, 3))
    assert chamfer_distance(p, q) == chamfer_distance(q, p)
    axis = np.array([1.0, 0.0, 0.0])
    values = [chamfer_distance(p, q + s * axis) for s in (0.0, 5.0, 10.0, 20.0)]
    assert all(b >= a for a, b in zip(values[1:], values[2:]))
    assert values[-1] >= values[0]


def test_point_cloud_files(tmp_path):
    pts = np.array([[0.0, 1.0, 2.0], [3.5, -1.0, 0.25]])
    xyz = tmp_path / "a.xyz"
    save_point_cloud(PointCloud(pts), xyz)
    np.testing.assert_allclose(load_point_cloud(xyz).points, pts)
    ply = tmp_path / "a.ply"
    ply.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float y\nproperty float x\n"
        "property float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n"
        "1 0 2\n-1 3.5 0.25\n"
    )
    np.testing.assert_allclose(load_point_cloud(ply).points, pts)


def test_surrogate_examples():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(32, 32))
    assert perceptual_distance(x, x) == 0
    ramp = np.tile(np.linspace(0, 1, 32), (32, 1))
    assert perceptual_distance(ramp, np.rot90(ramp)) > 0
    with pytest.raises(ShapeMismatchError):
        perceptual_distance(x, x[:16])


class ConstantAdapter:
    name = "fixed-metric"

    def __call__(self, a, b):
        return 0.25


def test_adapter_delegation():
    gen = np.random.default_rng(5).uniform(size=(2, 1, 3, 16, 16))
    report = evaluate_views(gen, gen, adapter=ConstantAdapter())
    assert report.perceptual_metric == "fixed-metric" and report.surrogate is False
    assert report.perceptual_mean == 0.25
    register_perceptual_adapter(ConstantAdapter())
    try:
        assert evaluate_views(gen, gen).surrogate is False
    finally:
        register_perceptual_adapter(None)
    assert evaluate_views(gen, gen).perceptual_metric == SURROGATE_NAME


def test_report_on_identical_sets():
    gen = np.random.default_rng(6).uniform(size=(4, 2, 3, 16, 16))
    report = evaluate_views(gen, gen, clouds=(np.zeros((1, 3)), np.ones((1, 3))), workers=3)
    assert report.ssim_mean == 1.0
    assert [(r.view_id, r.domain_id) for r in report.per_view][:3] == [(0, 0), (0, 1), (1, 0)]
    d = json.loads(json.dumps(report.to_dict()))
    assert d["surrogate"] is True and d["chamfer"] == pytest.approx(6.0)
    assert d["chamfer_definition"] == CHAMFER_DEFINITION


def test_report_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        evaluate_views(np.zeros((2, 1, 3, 16, 16)), np.zeros((1, 1, 3, 16, 16)))
