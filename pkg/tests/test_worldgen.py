import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.integrate import quad

from cuenav.worldgen import (LOOKAHEAD, CameraModel, CollectConfig, LineWorld, TrackLost, catmull_rom,
                             collect_dataset, cue_visible, generate_world, polyline_length, render, spiral_world,
                             straight_world, waypoint_label, world_for_record)


def hermite_length(points, alpha=0.5):
    """Arc length of the centripetal Catmull-Rom curve by adaptive quadrature of |P'(u)|.

    Uses the Hermite-tangent form of the curve, a different route from the
    pyramid evaluation used to build the polyline.
    """
    pts = np.asarray(points, dtype=np.float64)
    ext = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    total = 0.0
    for i in range(len(pts) - 1):
        p0, p1, p2, p3 = ext[i:i + 4]
        t1 = np.linalg.norm(p1 - p0) ** alpha
        t2 = t1 + np.linalg.norm(p2 - p1) ** alpha
        t3 = t2 + np.linalg.norm(p3 - p2) ** alpha
        dt = t2 - t1
        m1 = dt * ((p1 - p0) / t1 - (p2 - p0) / t2 + (p2 - p1) / dt)
        m2 = dt * ((p2 - p1) / dt - (p3 - p1) / (t3 - t1) + (p3 - p2) / (t3 - t2))

        def speed(u):
            d = (6 * u * u - 6 * u) * p1 + (3 * u * u - 4 * u + 1) * m1 + (6 * u - 6 * u * u) * p2 + (3 * u * u - 2 * u) * m2
            return math.hypot(d[0], d[1])

        total += quad(speed, 0.0, 1.0, limit=100)[0]
    return total


@pytest.fixture(scope="module")
def camera():
    return CameraModel(height=1.0, fov=math.radians(60), resolution=64)


class TestSpline:
    @given(st.integers(0, 2 ** 20))
    @settings(max_examples=40, deadline=None)
    def test_passes_through_control_points(self, seed):
        w = generate_world(seed)
        d = np.min(np.linalg.norm(w.spline[:, None, :] - w.control_points[None], axis=2), axis=0)
        assert np.all(d <= 1e-6)

    @given(st.integers(0, 2 ** 20))
    @settings(max_examples=40, deadline=None)
    def test_dense_sampling(self, seed):
        w = generate_world(seed)
        assert np.max(np.linalg.norm(np.diff(w.spline, axis=0), axis=1)) <= 0.01

    def test_collinear_stays_collinear(self):
        pts = np.array([[0.0, 0.0], [0.3, 0.15], [0.5, 0.25], [1.4, 0.7], [2.0, 1.0]])
        poly = catmull_rom(pts)
        cross = poly[:, 0] * 0.5 - poly[:, 1]
        assert np.max(np.abs(cross)) <= 1e-9

    def test_same_seed_same_world(self):
        a, b = generate_world(17, distractor_mode=True), generate_world(17, distractor_mode=True)
        assert a.spline.tobytes() == b.spline.tobytes()
        assert a.to_dict() == b.to_dict()

    def test_different_seeds_differ(self):
        assert generate_world(1).spline.shape != generate_world(2).spline.shape or \
            not np.array_equal(generate_world(1).spline, generate_world(2).spline)

    def test_length_within_five_percent_over_1000_worlds(self):
        bad = []
        for seed in range(1000):
            w = generate_world(seed, length=2.0)
            if abs(hermite_length(w.control_points) - 2.0) > 0.05 * 2.0:
                bad.append(seed)
        assert not bad

    @pytest.mark.parametrize("seed", range(5))
    def test_polyline_agrees_with_quadrature(self, seed):
        w = generate_world(seed)
        assert polyline_length(w.spline) == pytest.approx(hermite_length(w.control_points), rel=1e-4)

    @pytest.mark.parametrize("bad", [(0.0, 12.0), (-1.0, 0.5), (1.0, 0.5)])
    def test_infeasible_curvature_rejected(self, bad):
        with pytest.raises(ValueError):
            generate_world(0, curvature_range=bad)

    def test_nonpositive_length_rejected(self):
        with pytest.raises(ValueError):
            generate_world(0, length=0.0)

    def test_spiral_tightens(self):
        w = spiral_world()
        heading = np.unwrap(np.arctan2(*np.diff(w.spline, axis=0).T[::-1]))
        n = len(heading) // 4
        assert abs(heading[-1] - heading[-n]) > abs(heading[n] - heading[0])


class TestDistractors:
    def test_same_family_no_stripes(self):
        w = generate_world(3, distractor_mode=True)
        assert w.distractors
        tex = w.distractors[0].texture
        assert tex.stripe_depth == 0.0 and tex.stripe_depth != w.texture.stripe_depth
        base, fg = np.asarray(tex.base_rgb), np.asarray(w.texture.base_rgb)
        assert np.argmax(base) == np.argmax(fg)

    def test_mask_ignores_distractors(self, camera):
        plain = generate_world(5)
        busy = generate_world(5, distractor_mode=True)
        for pose in [(0.3, 0.0, 1.0, 0.0), (1.0, 0.1, 1.0, 0.4)]:
            img_a, mask_a = render(plain, camera.at(pose))
            img_b, mask_b = render(busy, camera.at(pose))
            np.testing.assert_array_equal(mask_a, mask_b)
            assert not np.array_equal(img_a, img_b)


class TestCamera:
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.3, 3), st.floats(-math.pi, math.pi))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, x, y, z, yaw):
        cam = CameraModel(resolution=64).at((x, y, z, yaw))
        pts = np.random.default_rng(0).uniform(-1, 1, (20, 2)) + [x, y]
        back = cam.pixel_to_ground(*np.moveaxis(cam.ground_to_pixel(pts), -1, 0))
        np.testing.assert_allclose(back, pts, atol=1e-9, rtol=0)

    def test_footprint_positive_area(self, camera):
        fp = camera.at((0.5, -0.2, 1.0, 0.7)).footprint()
        x, y = fp[:, 0], fp[:, 1]
        area = 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))
        side = 2 * camera.footprint_half_width()
        assert area == pytest.approx(side * side, rel=1e-9)

    def test_image_up_is_forward(self, camera):
        top_centre = camera.pixel_to_ground(0, 31.5)
        assert top_centre[0] > 0 and abs(top_centre[1]) < 1e-9

    def test_rejects_ground_level(self):
        with pytest.raises(ValueError):
            CameraModel().at((0, 0, 0.0, 0)).ground_resolution


class TestRender:
    def test_line_out_of_view(self, camera):
        img, mask = render(straight_world(), camera.at((0.0, 5.0, 1.0, 0.0)))
        assert np.all(img == 1.0) and not mask.any()

    def test_centre_row_run_width(self, camera):
        # a line along x under a yaw-0 camera runs vertically through the image centre
        world = straight_world(length=4.0)
        cam = camera.at((2.0, 0.0, 1.0, 0.0))
        _, mask = render(world, cam)
        row = mask[32]
        expected = 2 * world.half_width / cam.ground_resolution
        assert abs(int(row.sum()) - expected) <= 1.5
        on = np.flatnonzero(row)
        assert np.all(np.diff(on) == 1)

    @given(st.integers(0, 2 ** 16), st.floats(0, 2), st.floats(-0.15, 0.15), st.floats(-math.pi, math.pi))
    @settings(max_examples=25, deadline=None)
    def test_mask_image_consistency(self, seed, s, off, yaw):
        world = generate_world(seed)
        p = world.point_at(s)[0]
        img, mask = render(world, CameraModel(resolution=32).at((p[0], p[1] + off, 1.0, yaw)))
        assert np.all(img[mask == 0] == 1.0)
        assert np.all(np.any(img[mask == 1] < 1.0, axis=-1))
        assert img.dtype == np.float32 and mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1}

    def test_distractors_only_add_background(self, camera):
        # distractor pixels are background: non-white but outside the mask
        plain, busy = generate_world(8), generate_world(8, distractor_mode=True)
        cam = camera.at((1.0, 0.0, 1.0, 0.2))
        img_p, mask_p = render(plain, cam)
        img_b, mask_b = render(busy, cam)
        changed = np.any(img_p != img_b, axis=-1)
        assert changed.any()
        # only cue edge pixels (partly on a distractor) may change inside the mask
        assert (changed & (mask_p == 0)).sum() >= 0.9 * changed.sum()
        assert np.array_equal(mask_p, mask_b)

    def test_cue_visible(self, camera):
        world = straight_world()
        assert cue_visible(world, camera.at((1.0, 0.0, 1.0, 0.0)))
        assert not cue_visible(world, camera.at((1.0, 3.0, 1.0, 0.0)))


class TestWaypointLabel:
    def test_on_line_heading_along(self):
        w = waypoint_label((0.5, 0.0, 1.0, 0.0), straight_world())
        np.testing.assert_allclose(w, [LOOKAHEAD, 0.0, 0.0], atol=1e-9)

    def test_offset_left(self):
        w = waypoint_label((0.5, 0.1, 1.0, 0.0), straight_world())
        assert w[1] == pytest.approx(-0.1, abs=1e-6)
        assert w[0] == pytest.approx(LOOKAHEAD, abs=1e-6)

    @given(st.floats(-math.pi, math.pi), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_yaw_rotates_label(self, theta, seed):
        world = generate_world(seed)
        p = world.point_at(0.8)[0]
        w0 = waypoint_label((p[0], p[1] + 0.05, 1.0, 0.0), world)
        wt = waypoint_label((p[0], p[1] + 0.05, 1.0, theta), world)
        c, s = math.cos(-theta), math.sin(-theta)
        np.testing.assert_allclose(wt[:2], [c * w0[0] - s * w0[1], s * w0[0] + c * w0[1]], atol=1e-9)
        assert wt[2] == w0[2]

    def test_height_correction(self):
        assert waypoint_label((0.5, 0.0, 0.8, 0.0), straight_world())[2] == pytest.approx(0.2)

    def test_extrapolates_past_end(self):
        w = waypoint_label((1.95, 0.0, 1.0, 0.0), straight_world(length=2.0))
        np.testing.assert_allclose(w, [LOOKAHEAD, 0.0, 0.0], atol=1e-9)

    def test_track_lost(self):
        with pytest.raises(TrackLost):
            waypoint_label((0.5, 1.5, 1.0, 0.0), straight_world())

    @given(st.integers(0, 1000), st.floats(0, 2), st.floats(-0.2, 0.2))
    @settings(max_examples=40, deadline=None)
    def test_bounded_by_footprint(self, seed, s, off):
        world = generate_world(seed)
        cam = CameraModel()
        p = world.point_at(s)[0]
        w = waypoint_label((p[0], p[1] + off, 1.0, 0.0), world)
        seg = np.max(np.linalg.norm(np.diff(world.control_points, axis=0), axis=1))
        assert np.linalg.norm(w) <= 2 * math.sqrt(2) * cam.footprint_half_width() + seg


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = CollectConfig(resolution=32, seed=4)
    manifest = collect_dataset(2, 4, out, config=cfg)
    return out, manifest, cfg


class TestCollect:
    def test_single_sample(self, tmp_path):
        m = collect_dataset(1, 1, tmp_path, config=CollectConfig(resolution=32))
        assert m["count"] == 1
        assert len((tmp_path / "labels.jsonl").read_text().splitlines()) == 1

    def test_layout(self, tiny_dataset):
        out, manifest, _ = tiny_dataset
        assert manifest["count"] == 8
        recs = [json.loads(x) for x in (out / "labels.jsonl").read_text().splitlines()]
        assert [r["index"] for r in recs] == list(range(8))
        for r in recs:
            assert len(r["w"]) == 3 and len(r["v"]) == 4 and "world_seed" in r and len(r["pose"]) == 4
        disk = json.loads((out / "dataset.json").read_text())
        assert disk["count"] == 8 and disk["camera"]["resolution"] == 32

    def test_stored_mask_consistency(self, tiny_dataset):
        out, manifest, _ = tiny_dataset
        for i in range(manifest["count"]):
            img = np.asarray(Image.open(out / "images" / f"{i:06d}.png"))
            mask = np.asarray(Image.open(out / "masks" / f"{i:06d}.png"))
            assert set(np.unique(mask)) <= {0, 255}
            assert np.all(img[mask == 0] == 255)
            assert np.all(np.any(img[mask == 255] < 255, axis=-1))

    def test_labels_reproduce(self, tiny_dataset):
        out, _, cfg = tiny_dataset
        for line in (out / "labels.jsonl").read_text().splitlines():
            rec = json.loads(line)
            w = waypoint_label(rec["pose"], world_for_record(rec, cfg))
            np.testing.assert_allclose(w, rec["w"], atol=1e-6)

    def test_deterministic(self, tiny_dataset, tmp_path):
        out, _, cfg = tiny_dataset
        collect_dataset(2, 4, tmp_path, config=cfg)
        for rel in ["labels.jsonl", "dataset.json", "images/000003.png", "masks/000005.png"]:
            assert (out / rel).read_bytes() == (tmp_path / rel).read_bytes()

    def test_straight_flight_has_little_sideways_velocity(self, tmp_path):
        cfg = CollectConfig(resolution=32, curvature_range=(0.0, 0.0), start_offset=0.0, start_yaw=0.0)
        collect_dataset(3, 10, tmp_path, config=cfg)
        v = np.array([json.loads(x)["v"] for x in (tmp_path / "labels.jsonl").read_text().splitlines()])
        assert np.mean(np.abs(v[:, 1])) < 0.05 * np.mean(np.abs(v[:, 0]))


def test_world_round_trips_through_dict():
    w = generate_world(9, distractor_mode=True)
    d = w.to_dict()
    again = LineWorld.from_control_points(d["control_points"], half_width=d["half_width"])
    np.testing.assert_allclose(again.spline, w.spline, atol=1e-12)
