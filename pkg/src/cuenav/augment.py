"""Background compositing, foreground jitter/blur, triplets and brightness normalisation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .rng import substream

log = logging.getLogger(__name__)

BRIGHTNESS_TARGET = 140.0 / 255.0
BACKGROUND_FAMILIES = ("texture", "scene", "ood")


def _check_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {m.shape} does not match image shape {tuple(shape[:2])}")
    return m


def composite(mask, foreground, background) -> np.ndarray:
    """I = M*C + (1-M)*A, per channel."""
    c = np.asarray(foreground)
    a = np.asarray(background)
    if c.shape != a.shape:
        raise ValueError(f"foreground {c.shape} and background {a.shape} differ")
    m = _check_mask(mask, c.shape).astype(c.dtype)[..., None]
    return (m * c + (1 - m) * a).astype(c.dtype)


# foreground jitter ---------------------------------------------------------

def _select(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def adjust_brightness(image, mask, u: float) -> np.ndarray:
    out = np.array(image, copy=True)
    sel = _select(_check_mask(mask, out.shape))
    out[sel] = np.clip(out[sel] * u, 0.0, 1.0)
    return out


def rotate_hue(image, mask, angle: float) -> np.ndarray:
    """Rotate the HSV hue of foreground pixels by ``angle`` radians."""
    out = np.array(image, copy=True)
    sel = _select(_check_mask(mask, out.shape))
    if not np.any(sel):
        return out
    hsv = rgb_to_hsv(np.clip(out[sel], 0.0, 1.0))
    hsv[:, 0] = np.mod(hsv[:, 0] + angle / (2 * np.pi), 1.0)
    out[sel] = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def jitter_foreground(image, mask, brightness_factor: float = 0.5, hue_factor: float = 0.5,
                      seed=None) -> np.ndarray:
    """Random brightness scale u~U[1-f, 1+f] and hue rotation U[-f*pi, f*pi] on mask pixels."""
    for name, f in (("brightness", brightness_factor), ("hue", hue_factor)):
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"{name} factor {f} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.uniform(1.0 - brightness_factor, 1.0 + brightness_factor)
    angle = rng.uniform(-hue_factor * np.pi, hue_factor * np.pi)
    out = np.array(image, copy=True)
    if brightness_factor > 0:
        out = adjust_brightness(out, mask, u)
    if hue_factor > 0:
        out = rotate_hue(out, mask, angle)
    return out


# blur ------------------------------------------------------------------------

def gaussian_kernel(sigma: float, size: int = 9) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError(f"blur kernel size must be odd, got {size}")
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_image(image, sigma: float, size: int = 9) -> np.ndarray:
    k = gaussian_kernel(sigma, size)
    out = ndimage.convolve1d(np.asarray(image, dtype=np.float64), k, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


def blur_foreground(image, mask=None, sigma_range=(0.1, 2.0), kernel: int = 9, seed=None) -> np.ndarray:
    """Blur the whole foreground layer (cue on white) with a random sigma.

    Meant to run before compositing; the mask is left untouched so labels stay binary.
    """
    if kernel % 2 == 0:
        raise ValueError(f"blur kernel size must be odd, got {kernel}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = rng.uniform(*sigma_range)
    return blur_image(image, sigma, kernel)


# backgrounds -----------------------------------------------------------------

def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 3, cells + 3))
    out = ndimage.zoom(grid, size / cells, order=3, mode="grid-wrap")
    off = (out.shape[0] - size) // 2
    out = out[off:off + size, off:off + size]
    out -= out.min()
    return out / max(out.max(), 1e-9)


def _fractal(rng, size: int, octaves: int = 4, base: int = 2) -> np.ndarray:
    acc = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        acc += amp * _smooth_noise(rng, size, base * 2 ** o)
        total += amp
        amp *= 0.5
    return acc / total


def _palette(rng, n: int) -> np.ndarray:
    hsv = np.stack([rng.random(n), rng.uniform(0.1, 0.9, n), rng.uniform(0.2, 1.0, n)], axis=1)
    return hsv_to_rgb(hsv)


def _map_palette(t: np.ndarray, colours: np.ndarray) -> np.ndarray:
    xs = np.linspace(0, 1, len(colours))
    return np.stack([np.interp(t, xs, colours[:, c]) for c in range(3)], axis=-1)


def _coords(size: int):
    y, x = np.mgrid[0:size, 0:size] / size
    return x, y


def texture_background(rng, size: int) -> np.ndarray:
    """Close-up material textures: fractal noise, warped stripes, checks, dots."""
    x, y = _coords(size)
    kind = rng.integers(4)
    if kind == 0:
        t = _fractal(rng, size, octaves=int(rng.integers(3, 6)), base=int(rng.integers(2, 5)))
    elif kind == 1:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 14)
        warp = rng.uniform(0, 0.6) * _smooth_noise(rng, size, 3)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta) + warp))
    elif kind == 2:
        n = rng.uniform(3, 10)
        theta = rng.uniform(0, np.pi)
        u = x * np.cos(theta) - y * np.sin(theta)
        v = x * np.sin(theta) + y * np.cos(theta)
        t = ((np.floor(u * n) + np.floor(v * n)) % 2) * 0.7 + 0.3 * _fractal(rng, size, 3, 4)
    else:
        n = rng.uniform(4, 10)
        d = np.hypot((x * n) % 1 - 0.5, (y * n) % 1 - 0.5)
        t = (d < rng.uniform(0.15, 0.4)).astype(float) * 0.8 + 0.2 * _fractal(rng, size, 3, 4)
    img = _map_palette(np.clip(t, 0, 1), _palette(rng, int(rng.integers(2, 4))))
    grain = 0.08 * (rng.random((size, size, 1)) - 0.5)
    return np.clip(img + grain, 0, 1)


def scene_background(rng, size: int) -> np.ndarray:
    """Wide scene-like layouts: a horizon gradient, large shaded shapes, soft noise."""
    x, y = _coords(size)
    top, bottom = _palette(rng, 2)
    horizon = rng.uniform(0.2, 0.8)
    tilt = rng.uniform(-0.3, 0.3)
    sky = (y < horizon + tilt * (x - 0.5))[..., None]
    grad = y[..., None]
    img = np.where(sky, top * (0.8 + 0.2 * grad), bottom * (0.7 + 0.3 * grad))
    for _ in range(int(rng.integers(2, 7))):
        colour = _palette(rng, 1)[0]
        cx, cy = rng.random(2)
        w, h = rng.uniform(0.08, 0.5, 2)
        if rng.random() < 0.5:
            inside = (np.abs(x - cx) < w / 2) & (np.abs(y - cy) < h / 2)
        else:
            inside = ((x - cx) / w) ** 2 + ((y - cy) / h) ** 2 < 0.25
        shade = 0.75 + 0.25 * (1 - np.abs(y - cy) / max(h, 1e-3))
        img = np.where(inside[..., None], colour * np.clip(shade, 0.5, 1.0)[..., None], img)
    img = img * (0.85 + 0.3 * _fractal(rng, size, 3, 2))[..., None]
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    return np.clip(img, 0, 1)


def ood_background(rng, size: int) -> np.ndarray:
    """Held-out families never used in training: Voronoi cells, wood rings, blotches."""
    x, y = _coords(size)
    kind = rng.integers(3)
    if kind == 0:
        seeds = rng.random((int(rng.integers(6, 20)), 2))
        d = np.hypot(x[..., None] - seeds[:, 0], y[..., None] - seeds[:, 1])
        cell = np.argmin(d, axis=-1)
        colours = _palette(rng, len(seeds))
        img = colours[cell]
        srt = np.sort(d, axis=-1)
        img = img * np.clip((srt[..., 1] - srt[..., 0]) * 30, 0.4, 1.0)[..., None]
    elif kind == 1:
        cx, cy = rng.uniform(-0.5, 1.5, 2)
        r = np.hypot(x - cx, y - cy) + 0.1 * _fractal(rng, size, 3, 3)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(5, 15) * r)
        img = _map_palette(t, _palette(rng, 2))
    else:
        t = _fractal(rng, size, 4, 3)
        levels = int(rng.integers(2, 5))
        t = np.floor(t * levels) / max(levels - 1, 1)
        img = _map_palette(np.clip(t, 0, 1), _palette(rng, levels))
    return np.clip(img, 0, 1)


_GENERATORS = {"texture": texture_background, "scene": scene_background, "ood": ood_background}


def load_image(path, size: int) -> np.ndarray:
    """Center-crop to square and scale to ``size``."""
    from PIL import Image
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        im = im.crop((left, top, left + s, top + s)).resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


@dataclass
class BackgroundPool:
    """A fixed, indexable set of background images.

    ``source`` is a generator family name ("texture", "scene", "ood"), several
    joined with "+", or a directory of images.
    """
    source: str
    resolution: int = 64
    size: int = 256
    seed: int = 0
    _items: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        parts = self.source.split("+")
        if all(p in _GENERATORS for p in parts):
            per = [self.size // len(parts) + (i < self.size % len(parts)) for i in range(len(parts))]
            items = []
            for fam, n in zip(parts, per):
                for i in range(n):
                    rng = substream(self.seed, "background", fam, i)
                    items.append(_GENERATORS[fam](rng, self.resolution))
            self._items = np.stack(items).astype(np.float32)
        else:
            path = Path(self.source)
            if not path.is_dir():
                raise ValueError(f"background source {self.source!r} is neither a generator nor a directory")
            files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
            if not files:
                raise ValueError(f"no images in background directory {path}")
            self._items = np.stack([load_image(f, self.resolution) for f in files])
        self.size = len(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def get(self, index: int, flip: int = 0) -> np.ndarray:
        """Background ``index`` under one of 8 flips/rotations."""
        img = self._items[index % len(self)]
        if flip & 4:
            img = img[:, ::-1]
        return np.ascontiguousarray(np.rot90(img, flip & 3))

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        idx = int(rng.integers(len(self)))
        return self.get(idx, int(rng.integers(8))), idx


# augmentation pipeline -------------------------------------------------------

@dataclass
class AugmentConfig:
    backgrounds: str = "none"         # "none", a family, "texture+scene", or a directory
    brightness: float = 0.0
    hue: float = 0.0
    blur: bool = False
    sigma_range: tuple[float, float] = (0.1, 2.0)
    kernel: int = 9
    pool_size: int = 256

    @property
    def enabled(self) -> bool:
        return self.backgrounds != "none" or self.brightness > 0 or self.hue > 0 or self.blur


def augment_foreground(image, mask, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = image
    if cfg.brightness > 0 or cfg.hue > 0:
        out = jitter_foreground(out, mask, cfg.brightness, cfg.hue, rng)
    if cfg.blur:
        out = blur_foreground(out, mask, cfg.sigma_range, cfg.kernel, rng)
    return out


def augment_sample(image, mask, cfg: AugmentConfig, pool: BackgroundPool | None,
                   rng: np.random.Generator) -> np.ndarray:
    """Foreground jitter and blur, then composite onto a pool background."""
    fg = augment_foreground(image, mask, cfg, rng)
    if pool is None:
        return fg
    bg, _ = pool.sample(rng)
    return composite(mask, fg, bg)


# triplets --------------------------------------------------------------------

@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    mask: np.ndarray          # mask of r (anchor and positive)
    negative_mask: np.ndarray  # mask of r'
    indices: tuple[int, int]
    backgrounds: tuple[int, int]


def sample_triplet(images, masks, pool: BackgroundPool, seed, cfg: AugmentConfig | None = None) -> Triplet:
    """Anchor r+b, positive r+b', negative r'+b.

    Jitter and blur are drawn once per foreground source, so the anchor and
    positive carry identical foreground pixels.
    """
    n = len(images)
    if n < 2:
        raise ValueError("triplets need at least two foreground samples")
    if len(pool) < 2:
        raise ValueError("triplets need at least two backgrounds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    i, j = (int(v) for v in rng.choice(n, 2, replace=False))
    k, l = (int(v) for v in rng.choice(len(pool), 2, replace=False))
    fk, fl = (int(v) for v in rng.integers(8, size=2))
    b, b2 = pool.get(k, fk), pool.get(l, fl)
    cfg = cfg or AugmentConfig()
    r = augment_foreground(images[i], masks[i], cfg, rng)
    r2 = augment_foreground(images[j], masks[j], cfg, rng)
    return Triplet(
        anchor=composite(masks[i], r, b),
        positive=composite(masks[i], r, b2),
        negative=composite(masks[j], r2, b),
        mask=np.asarray(masks[i]),
        negative_mask=np.asarray(masks[j]),
        indices=(i, j),
        backgrounds=(k, l),
    )


# brightness --------------------------------------------------------------------

def luminance(image) -> float:
    return float(np.mean(image))


def normalize_brightness(image, target: float = BRIGHTNESS_TARGET) -> tuple[np.ndarray, bool]:
    """Scale the image so its mean intensity is ``target``.

    Returns (image, flagged); an all-black input is returned unchanged with flagged=True.
    """
    img = np.asarray(image)
    mean = luminance(img)
    if mean <= 0.0:
        log.warning("normalize_brightness: all-black image left unchanged")
        return img.copy(), True
    # clipping pulls the mean below target; a few fixed-point passes recover it
    gain = target / mean
    for _ in range(8):
        out = np.clip(img * gain, 0.0, 1.0)
        m = float(np.mean(out))
        if abs(m - target) < 1e-4 or m <= 0:
            break
        unsat = np.mean(np.where(img * gain < 1.0, img, 0.0))
        if unsat <= 0:
            break
        gain += (target - m) / unsat
    return out.astype(img.dtype), False


# OOD proxy -------------------------------------------------------------------

def make_ood_proxy(n: int = 32, seed: int = 0, resolution: int = 64, fov_deg: float = 60.0,
                   length: float = 2.0, curvature_range=(0.0, 1.2)) -> tuple[np.ndarray, np.ndarray]:
    """Rendered images with held-out backgrounds, foreground textures and lighting."""
    from .worldgen import CameraModel, generate_world, render

    pool = BackgroundPool("ood", resolution=resolution, size=max(n, 16), seed=seed)
    camera = CameraModel(fov=math.radians(fov_deg), resolution=resolution)
    images, masks = [], []
    for i in range(n):
        rng = substream(seed, "ood-proxy", i)
        world = generate_world(int(rng.integers(2 ** 31)), curvature_range, length, held_out_texture=True)
        s = rng.uniform(0.1, world.length - 0.3)
        p = world.point_at(s)[0]
        t = world.tangent_at(s)[0]
        lateral = rng.uniform(-0.15, 0.15)
        pos = p + lateral * np.array([-t[1], t[0]])
        yaw = math.atan2(t[1], t[0]) + rng.uniform(-0.3, 0.3)
        fg, mask = render(world, camera.at((pos[0], pos[1], rng.uniform(0.9, 1.1), yaw)))
        img = composite(mask, fg, pool.get(i, int(rng.integers(8))))
        gain = rng.choice([rng.uniform(0.55, 0.8), rng.uniform(1.2, 1.45)])
        cast = rng.uniform(0.9, 1.1, 3)
        images.append(np.clip(img * gain * cast, 0, 1).astype(np.float32))
        masks.append(mask)
    return np.stack(images), np.stack(masks)


# world-anchored ground ---------------------------------------------------------

@dataclass
class GroundTexture:
    """A background image laid on the ground plane and tiled periodically.

    Views rendered from different poses see consistent, moving background
    content, as a real downward camera would.
    """
    image: np.ndarray
    extent: float = 2.3   # metres covered by one tile

    @classmethod
    def generate(cls, family: str, seed: int = 0, size: int = 128, extent: float = 2.3) -> GroundTexture:
        if family not in _GENERATORS:
            raise ValueError(f"unknown ground family {family!r}")
        return cls(_GENERATORS[family](substream(seed, "ground", family), size).astype(np.float32), extent)

    def view(self, camera) -> np.ndarray:
        r = camera.resolution
        rows, cols = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
        pts = camera.pixel_to_ground(rows, cols)
        n = self.image.shape[0]
        u = pts[..., 0] / self.extent * n
        v = pts[..., 1] / self.extent * n
        out = np.empty((r, r, 3), dtype=np.float32)
        for c in range(3):
            out[..., c] = ndimage.map_coordinates(self.image[..., c], [v, u], order=1, mode="grid-wrap")
        return np.clip(out, 0.0, 1.0)
