"""Line worlds, a downward pinhole camera, rendering and label generation.

Coordinates: world frame x/y on the ground plane, z up. Body frame x
forward, y left, z up. The camera looks straight down with image "up" along
body +x and image "right" along body -y.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .rng import substream

log = logging.getLogger(__name__)

POLYLINE_SPACING = 0.004   # target spacing of dense spline samples (m)
PARTITION = 0.25           # arc-length partition of the line (m)
LOOKAHEAD = 0.25           # waypoint lookahead D_min (m)
FLIGHT_HEIGHT = 1.0
CATMULL_ALPHA = 0.5        # centripetal parameterisation


class TrackLost(RuntimeError):
    """The drone is too far from the line for a meaningful waypoint."""


# ---------------------------------------------------------------------------
# textures

@dataclass(frozen=True)
class TextureSpec:
    base_rgb: tuple[float, float, float] = (0.92, 0.38, 0.12)
    stripe_period: float = 0.15
    stripe_depth: float = 0.3
    shade: float = 0.35
    noise_amp: float = 0.06
    noise_seed: int = 0

    def color(self, s: np.ndarray, d: np.ndarray, half_width: float) -> np.ndarray:
        """RGB at arc length ``s`` and signed lateral offset ``d``."""
        stripe = 0.5 + 0.5 * np.cos(2 * np.pi * s / self.stripe_period)
        across = np.clip(d / half_width, -1.0, 1.0)
        shade = 1.0 - self.shade * across ** 2
        rng = np.random.default_rng(self.noise_seed)
        freqs = rng.uniform(8.0, 40.0, 3)
        phases = rng.uniform(0, 2 * np.pi, 3)
        noise = sum(np.sin(2 * np.pi * f * s + p) for f, p in zip(freqs, phases)) / 3.0
        gain = (1.0 - self.stripe_depth * stripe) * shade * (1.0 + self.noise_amp * noise)
        rgb = np.asarray(self.base_rgb)[None, :] * gain[:, None]
        # keep the cue strictly non-white so mask/image consistency survives 8-bit storage
        return np.clip(rgb, 0.0, 0.9)


def random_texture(rng: np.random.Generator, held_out: bool = False) -> TextureSpec:
    """Foreground texture draw. ``held_out`` selects parameters never seen in training."""
    import colorsys
    if held_out:
        hue = rng.uniform(0.0, 0.03)
        period = rng.uniform(0.05, 0.08)
        depth = rng.uniform(0.35, 0.5)
        sat, val = rng.uniform(0.7, 0.95), rng.uniform(0.7, 0.95)
    else:
        hue = rng.uniform(0.04, 0.08)
        period = rng.uniform(0.10, 0.20)
        depth = rng.uniform(0.15, 0.35)
        sat, val = rng.uniform(0.75, 0.9), rng.uniform(0.85, 0.95)
    rgb = colorsys.hsv_to_rgb(hue, sat, val)
    return TextureSpec(base_rgb=tuple(float(c) for c in rgb), stripe_period=float(period),
                       stripe_depth=float(depth), shade=float(rng.uniform(0.2, 0.45)),
                       noise_amp=float(rng.uniform(0.02, 0.08)), noise_seed=int(rng.integers(2 ** 31)))


# ---------------------------------------------------------------------------
# splines

def catmull_rom(points: np.ndarray, samples_per_segment: np.ndarray | int | None = None,
                alpha: float = CATMULL_ALPHA) -> np.ndarray:
    """Dense polyline through ``points`` (N, 2) using a centripetal Catmull-Rom spline.

    Every control point appears verbatim as a polyline vertex.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least two control points")
    ext = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    if samples_per_segment is None:
        chord = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        samples_per_segment = np.maximum(2, np.ceil(1.6 * chord / POLYLINE_SPACING)).astype(int)
    elif np.isscalar(samples_per_segment):
        samples_per_segment = np.full(n - 1, int(samples_per_segment))
    out = [pts[:1]]
    for i in range(n - 1):
        p0, p1, p2, p3 = ext[i], ext[i + 1], ext[i + 2], ext[i + 3]
        t0 = 0.0
        t1 = t0 + max(np.linalg.norm(p1 - p0), 1e-12) ** alpha
        t2 = t1 + max(np.linalg.norm(p2 - p1), 1e-12) ** alpha
        t3 = t2 + max(np.linalg.norm(p3 - p2), 1e-12) ** alpha
        m = int(samples_per_segment[i])
        t = np.linspace(t1, t2, m + 1)[1:, None]
        a1 = (t1 - t) / (t1 - t0) * p0 + (t - t0) / (t1 - t0) * p1
        a2 = (t2 - t) / (t2 - t1) * p1 + (t - t1) / (t2 - t1) * p2
        a3 = (t3 - t) / (t3 - t2) * p2 + (t - t2) / (t3 - t2) * p3
        b1 = (t2 - t) / (t2 - t0) * a1 + (t - t0) / (t2 - t0) * a2
        b2 = (t3 - t) / (t3 - t1) * a2 + (t - t1) / (t3 - t1) * a3
        c = (t2 - t) / (t2 - t1) * b1 + (t - t1) / (t2 - t1) * b2
        c[-1] = p2
        out.append(c)
    return np.vstack(out)


def polyline_length(poly: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())


@dataclass
class Distractor:
    start: tuple[float, float]
    end: tuple[float, float]
    half_width: float
    texture: TextureSpec


@dataclass
class LineWorld:
    control_points: np.ndarray
    spline: np.ndarray
    half_width: float = 0.05
    texture: TextureSpec = field(default_factory=TextureSpec)
    distractors: list[Distractor] = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=np.float64)
        self.spline = np.asarray(self.spline, dtype=np.float64)
        seg = np.diff(self.spline, axis=0)
        self._seg = seg
        self._seg_len = np.linalg.norm(seg, axis=1)
        self.arclength = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self._tree = cKDTree(self.spline)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def point_at(self, s) -> np.ndarray:
        """Point at arc length ``s``; beyond either end the end tangent is extended."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        x = np.interp(s, self.arclength, self.spline[:, 0])
        y = np.interp(s, self.arclength, self.spline[:, 1])
        pts = np.stack([x, y], axis=1)
        over = s > self.length
        if np.any(over):
            t = self._seg[-1] / self._seg_len[-1]
            pts[over] = self.spline[-1] + (s[over] - self.length)[:, None] * t
        under = s < 0
        if np.any(under):
            t = self._seg[0] / self._seg_len[0]
            pts[under] = self.spline[0] + s[under][:, None] * t
        return pts

    def tangent_at(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        idx = np.clip(np.searchsorted(self.arclength, s, side="right") - 1, 0, len(self._seg) - 1)
        return self._seg[idx] / self._seg_len[idx][:, None]

    def project(self, pts: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest spline point for each query point.

        Returns (distance, arc length, signed lateral offset; positive = left of travel).
        """
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        n_seg = len(self._seg)
        k = min(k, len(self.spline))
        _, idx = self._tree.query(pts, k=k)
        idx = idx.reshape(len(pts), k)
        cand = np.concatenate([np.clip(idx - 1, 0, n_seg - 1), np.clip(idx, 0, n_seg - 1)], axis=1)
        a = self.spline[cand]                      # (N, C, 2)
        ab = self._seg[cand]
        ap = pts[:, None, :] - a
        t = np.clip((ap * ab).sum(-1) / (self._seg_len[cand] ** 2), 0.0, 1.0)
        q = a + t[..., None] * ab
        dist = np.linalg.norm(pts[:, None, :] - q, axis=-1)
        best = np.argmin(dist, axis=1)
        rows = np.arange(len(pts))
        seg_idx = cand[rows, best]
        tb = t[rows, best]
        s = self.arclength[seg_idx] + tb * self._seg_len[seg_idx]
        dvec = pts - q[rows, best]
        tan = self._seg[seg_idx] / self._seg_len[seg_idx][:, None]
        lateral = tan[:, 0] * dvec[:, 1] - tan[:, 1] * dvec[:, 0]
        return dist[rows, best], s, lateral

    @property
    def final_partition(self) -> float:
        """Arc length of the last partition point (the line end)."""
        return self.length

    def partitions(self) -> np.ndarray:
        s = np.arange(0.0, self.length + 1e-9, PARTITION)
        if self.length - s[-1] > 1e-9:
            s = np.append(s, self.length)
        return s

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "control_points": self.control_points.tolist(),
            "half_width": self.half_width,
            "texture": asdict(self.texture),
            "distractors": [
                {"start": list(d.start), "end": list(d.end), "half_width": d.half_width, "texture": asdict(d.texture)}
                for d in self.distractors
            ],
        }

    @classmethod
    def from_control_points(cls, points, **kwargs) -> LineWorld:
        points = np.asarray(points, dtype=np.float64)
        return cls(control_points=points, spline=catmull_rom(points), **kwargs)


def _validate_curvature(curvature_range, half_width: float) -> tuple[float, float]:
    lo, hi = (float(v) for v in curvature_range)
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid curvature range {curvature_range}")
    if hi > 0 and 1.0 / hi <= 2 * half_width:
        raise ValueError(f"curvature {hi} 1/m gives a turn radius below the line width {2 * half_width} m")
    return lo, hi


def generate_world(seed: int, curvature_range=(0.0, 1.2), length: float = 2.0,
                   distractor_mode: bool = False, half_width: float = 0.05,
                   n_control: int | None = None, held_out_texture: bool = False) -> LineWorld:
    """Random line starting at the origin heading along +x.

    Curvature magnitudes are drawn from ``curvature_range`` (1/m) with random sign.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    lo, hi = _validate_curvature(curvature_range, half_width)
    rng = substream(seed, "world")
    n = int(n_control) if n_control is not None else int(rng.integers(5, 11))
    spacing = length / (n - 1)
    heading = 0.0
    pts = [np.zeros(2)]
    for i in range(1, n):
        if i > 1:
            kappa = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
            heading += kappa * spacing
        pts.append(pts[-1] + spacing * np.array([math.cos(heading), math.sin(heading)]))
    pts = np.array(pts)
    spline = catmull_rom(pts)
    # centripetal Catmull-Rom commutes with uniform scaling, so one rescale hits the target length
    scale = length / polyline_length(spline)
    pts = pts * scale
    spline = spline * scale
    texture = random_texture(rng, held_out=held_out_texture)
    world = LineWorld(control_points=pts, spline=spline, half_width=half_width, texture=texture, seed=seed)
    if distractor_mode:
        world.distractors = _grid_distractors(world, rng)
    return world


def straight_world(length: float = 2.0, half_width: float = 0.05, texture: TextureSpec | None = None,
                   heading: float = 0.0) -> LineWorld:
    d = np.array([math.cos(heading), math.sin(heading)])
    pts = np.array([d * length * i / 4 for i in range(5)])
    return LineWorld(control_points=pts, spline=catmull_rom(pts), half_width=half_width,
                     texture=texture or TextureSpec(), seed=None)


def spiral_world(length: float = 3.0, k_start: float = 0.2, k_end: float = 3.0,
                 half_width: float = 0.05, n_control: int = 12) -> LineWorld:
    """Line whose curvature grows linearly along its length (an increasingly sharp turn)."""
    _validate_curvature((min(k_start, k_end), max(k_start, k_end)), half_width)
    spacing = length / (n_control - 1)
    heading, pts = 0.0, [np.zeros(2)]
    for i in range(1, n_control):
        frac = (i - 1) / max(n_control - 2, 1)
        if i > 1:
            heading += (k_start + (k_end - k_start) * frac) * spacing
        pts.append(pts[-1] + spacing * np.array([math.cos(heading), math.sin(heading)]))
    pts = np.array(pts)
    spline = catmull_rom(pts)
    scale = length / polyline_length(spline)
    return LineWorld(control_points=pts * scale, spline=spline * scale, half_width=half_width, seed=None)


def _grid_distractors(world: LineWorld, rng: np.random.Generator, spacing: float = 0.45) -> list[Distractor]:
    lo = world.spline.min(axis=0) - 1.0
    hi = world.spline.max(axis=0) + 1.0
    angle = rng.uniform(0, np.pi / 2)
    base = np.asarray(world.texture.base_rgb)
    # same colour family, plain (unstriped) texture
    tex = TextureSpec(base_rgb=tuple(np.clip(base * rng.uniform(0.85, 1.05), 0, 0.9).tolist()),
                      stripe_period=1.0, stripe_depth=0.0, shade=0.1, noise_amp=0.0, noise_seed=0)
    centre = (lo + hi) / 2
    radius = float(np.linalg.norm(hi - lo)) / 2
    out = []
    for theta in (angle, angle + np.pi / 2):
        d = np.array([math.cos(theta), math.sin(theta)])
        nrm = np.array([-d[1], d[0]])
        offset = rng.uniform(0, spacing)
        for k in np.arange(-radius, radius + spacing, spacing):
            c = centre + (k + offset) * nrm
            a, b = c - radius * d, c + radius * d
            out.append(Distractor(tuple(a.tolist()), tuple(b.tolist()), world.half_width, tex))
    return out


# ---------------------------------------------------------------------------
# camera

@dataclass
class CameraModel:
    height: float = FLIGHT_HEIGHT
    fov: float = math.radians(60.0)
    resolution: int = 64
    pose: tuple[float, float, float, float] = (0.0, 0.0, FLIGHT_HEIGHT, 0.0)

    def __post_init__(self):
        self.pose = tuple(float(v) for v in self.pose)

    def at(self, pose) -> CameraModel:
        return CameraModel(self.height, self.fov, self.resolution, tuple(pose))

    @property
    def focal_px(self) -> float:
        return (self.resolution / 2.0) / math.tan(self.fov / 2.0)

    @property
    def altitude(self) -> float:
        z = self.pose[2]
        if z <= 0:
            raise ValueError("camera must be above the ground")
        return z

    @property
    def ground_resolution(self) -> float:
        """Metres per pixel on the ground."""
        return self.altitude / self.focal_px

    def footprint_half_width(self) -> float:
        return self.altitude * math.tan(self.fov / 2.0)

    def pixel_to_ground(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        x, y, _, yaw = self.pose
        z = self.altitude
        f, c = self.focal_px, self.resolution / 2.0
        u = (cols + 0.5 - c) / f
        v = (rows + 0.5 - c) / f
        bx, by = -v * z, -u * z
        cy, sy = math.cos(yaw), math.sin(yaw)
        return np.stack([x + cy * bx - sy * by, y + sy * bx + cy * by], axis=-1)

    def ground_to_pixel(self, pts) -> np.ndarray:
        """World ground points (..., 2) -> fractional (row, col)."""
        pts = np.asarray(pts, dtype=np.float64)
        x, y, _, yaw = self.pose
        z = self.altitude
        dx, dy = pts[..., 0] - x, pts[..., 1] - y
        cy, sy = math.cos(yaw), math.sin(yaw)
        bx = cy * dx + sy * dy
        by = -sy * dx + cy * dy
        f, c = self.focal_px, self.resolution / 2.0
        u, v = -by / z, -bx / z
        return np.stack([v * f + c - 0.5, u * f + c - 0.5], axis=-1)

    def footprint(self) -> np.ndarray:
        """Ground-plane corners of the image, (4, 2)."""
        r = self.resolution
        rows = np.array([-0.5, -0.5, r - 0.5, r - 0.5])
        cols = np.array([-0.5, r - 0.5, r - 0.5, -0.5])
        return self.pixel_to_ground(rows, cols)

    def sees(self, pts) -> np.ndarray:
        rc = self.ground_to_pixel(pts)
        r = self.resolution
        return (rc[..., 0] >= -0.5) & (rc[..., 0] <= r - 0.5) & (rc[..., 1] >= -0.5) & (rc[..., 1] <= r - 0.5)


# ---------------------------------------------------------------------------
# rendering

_SUBSAMPLES = np.array([[-0.25, -0.25], [-0.25, 0.25], [0.25, -0.25], [0.25, 0.25]])


def _sample_grid(camera: CameraModel) -> np.ndarray:
    r = camera.resolution
    rows, cols = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    rr = rows[..., None] + _SUBSAMPLES[:, 0]
    cc = cols[..., None] + _SUBSAMPLES[:, 1]
    return camera.pixel_to_ground(rr, cc)  # (H, W, S, 2)


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
    q = a + t[:, None] * ab
    return np.linalg.norm(pts - q, axis=1), t


def render(world: LineWorld, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Render the cue over a white ground.

    Returns an (H, W, 3) float32 image in [0, 1] and an (H, W) uint8 mask. The
    image is antialiased with 4 samples per pixel; a mask pixel is 1 when any
    of its samples lies on the cue, so mask == 0 implies an exactly white pixel
    (distractors, when present, are background and never enter the mask).
    """
    r = camera.resolution
    grid = _sample_grid(camera)
    flat = grid.reshape(-1, 2)
    n = len(flat)
    inside = np.zeros(n, dtype=bool)
    colour = np.ones((n, 3), dtype=np.float64)

    fp = camera.footprint()
    margin = world.half_width + 0.02
    lo, hi = fp.min(axis=0) - margin, fp.max(axis=0) + margin
    near = np.all((world.spline >= lo) & (world.spline <= hi), axis=1)
    if np.any(near):
        dist, s, lat = world.project(flat)
        inside = dist <= world.half_width
        if np.any(inside):
            colour[inside] = world.texture.color(s[inside], lat[inside], world.half_width)

    for dis in world.distractors:
        a, b = np.asarray(dis.start), np.asarray(dis.end)
        d, t = _segment_distance(flat, a, b)
        hit = (d <= dis.half_width) & ~inside
        if np.any(hit):
            s = t[hit] * np.linalg.norm(b - a)
            colour[hit] = dis.texture.color(s, d[hit], dis.half_width)

    image = colour.reshape(r, r, len(_SUBSAMPLES), 3).mean(axis=2).astype(np.float32)
    mask = inside.reshape(r, r, len(_SUBSAMPLES)).any(axis=2).astype(np.uint8)
    return image, mask


def cue_visible(world: LineWorld, camera: CameraModel) -> bool:
    return bool(np.any(camera.sees(world.spline)))


# ---------------------------------------------------------------------------
# labels

def _rotate(vec, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1]])


def waypoint_label(pose, world: LineWorld, lookahead: float = LOOKAHEAD,
                   flight_height: float = FLIGHT_HEIGHT, recovery: float | None = None) -> np.ndarray:
    """Body-frame waypoint: the spline point ``lookahead`` metres of arc ahead of the closest point.

    Past the line end the end tangent is extended so the drone is led across
    the final partition. The z component is the height correction to the
    nominal flight height.
    """
    x, y, z, yaw = (float(v) for v in pose)
    if recovery is None:
        recovery = flight_height * math.tan(math.radians(30.0))
    dist, s, _ = world.project(np.array([[x, y]]))
    if dist[0] > recovery:
        raise TrackLost(f"drone {dist[0]:.3f} m from the line (recovery limit {recovery:.3f} m)")
    target = world.point_at(s[0] + lookahead)[0]
    rel = _rotate(target - np.array([x, y]), -yaw)
    return np.array([rel[0], rel[1], flight_height - z])


def closest_arclength(pose, world: LineWorld) -> float:
    _, s, _ = world.project(np.array([[pose[0], pose[1]]]))
    return float(s[0])


# ---------------------------------------------------------------------------
# dataset collection

@dataclass
class CollectConfig:
    n_worlds: int = 100
    samples_per_world: int = 20
    resolution: int = 64
    fov_deg: float = 60.0
    height: float = FLIGHT_HEIGHT
    length: float = 2.0
    curvature_range: tuple[float, float] = (0.0, 1.2)
    half_width: float = 0.05
    seed: int = 0
    start_offset: float = 0.12   # max initial lateral offset of the expert (m)
    start_yaw: float = 0.35      # max initial heading error (rad)
    ood_samples: int = 32


def collect_dataset(n_worlds: int, samples_per_world: int, out_dir, expert=None,
                    config: CollectConfig | None = None) -> dict:
    """Fly the expert over fresh worlds and store samples at the states it visits.

    Writes ``images/``, ``masks/``, ``labels.jsonl`` and ``dataset.json`` under
    ``out_dir`` and returns the manifest.
    """
    from PIL import Image

    from . import simloop

    cfg = config or CollectConfig()
    cfg = CollectConfig(**{**asdict(cfg), "n_worlds": n_worlds, "samples_per_world": samples_per_world})
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    camera = CameraModel(height=cfg.height, fov=math.radians(cfg.fov_deg), resolution=cfg.resolution)
    expert = expert or simloop.OraclePolicy("waypoint")
    dyn = simloop.DynamicsConfig.profile("train-sim")

    records, aborted, index = [], [], 0
    with open(out / "labels.jsonl", "w") as labels:
        for w in range(cfg.n_worlds):
            world_seed = int(substream(cfg.seed, "worldgen", w).integers(2 ** 31))
            world = generate_world(world_seed, cfg.curvature_range, cfg.length, half_width=cfg.half_width)
            init = substream(cfg.seed, "expert-start", w)
            offset = init.uniform(-cfg.start_offset, cfg.start_offset)
            yaw0 = init.uniform(-cfg.start_yaw, cfg.start_yaw)
            result = simloop.run_episode(world, expert, dynamics=dyn, seed=world_seed, camera=camera,
                                         start_offset=offset, start_yaw=yaw0)
            ticks = [t for t in result.network_ticks() if t.get("w") is not None]
            if not result.success or not ticks:
                log.warning("world %d: expert failed (%s); skipped", w, result.reason)
                aborted.append({"world": w, "seed": world_seed, "reason": result.reason})
                continue
            pick = np.linspace(0, len(ticks) - 1, min(cfg.samples_per_world, len(ticks))).round().astype(int)
            for t in pick:
                tick = ticks[t]
                pose = tick["pose"]
                image, mask = render(world, camera.at(pose))
                name = f"{index:06d}.png"
                Image.fromarray(np.round(image * 255).astype(np.uint8)).save(out / "images" / name)
                Image.fromarray(mask * 255).save(out / "masks" / name)
                rec = {"index": index, "pose": [float(v) for v in pose], "w": [float(v) for v in tick["w"]],
                       "v": [float(v) for v in tick["v"]], "world_seed": world_seed, "world": w}
                labels.write(json.dumps(rec) + "\n")
                records.append(rec)
                index += 1
    manifest = {
        "config": asdict(cfg),
        "count": index,
        "worlds": cfg.n_worlds,
        "aborted": aborted,
        "camera": {"height": cfg.height, "fov_deg": cfg.fov_deg, "resolution": cfg.resolution},
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def world_for_record(rec: dict, cfg: CollectConfig) -> LineWorld:
    return generate_world(rec["world_seed"], cfg.curvature_range, cfg.length, half_width=cfg.half_width)
