"""Procedural motion-blur samples with analytic ground-truth flow.

A scene is a value-noise background plus textured rectangular sprites that
translate linearly over the exposure. The blurred image is the mean of ``n``
rendered sub-frames spaced uniformly in time, endpoints included, with
``n = ceil(max(s, 5))`` for the largest ground-truth displacement ``s``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import flow_io

MIN_SUBFRAMES = 5


class GenerationError(RuntimeError):
    pass


@dataclass
class Sprite:
    size: tuple  # (height, width) in pixels
    start: tuple  # top-left (x, y) at t=0, pixels
    displacement: tuple  # (dx, dy) over the whole exposure
    depth: int  # larger draws on top
    texture_seed: int = 0
    color: Optional[tuple] = None  # flat RGB overrides the procedural texture


@dataclass
class SceneSpec:
    height: int
    width: int
    sprites: list = field(default_factory=list)
    background_seed: Optional[int] = 0
    background_color: tuple = (0.0, 0.0, 0.0)  # used when background_seed is None
    camera_start: tuple = (0.0, 0.0)
    camera_displacement: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        depths = [s.depth for s in self.sprites]
        if len(set(depths)) != len(depths):
            raise ValueError(f"sprite depth orders must be unique, got {depths}")

    def reversed(self) -> "SceneSpec":
        """Same exposure played backwards: starts move to the end positions."""
        sprites = [
            replace(s, start=(s.start[0] + s.displacement[0], s.start[1] + s.displacement[1]),
                    displacement=(-s.displacement[0], -s.displacement[1]))
            for s in self.sprites
        ]
        cam = self.camera_displacement
        return replace(
            self, sprites=sprites,
            camera_start=(self.camera_start[0] + cam[0], self.camera_start[1] + cam[1]),
            camera_displacement=(-cam[0], -cam[1]),
        )


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    s_max: float = 12.0
    discard_threshold: float = 16.0
    min_sprites: int = 1
    max_sprites: int = 4
    sprite_min_size: int = 12
    sprite_max_size: int = 32
    camera_prob: float = 1.0
    camera_s_max: float = 12.0
    # "rightward" draws motion angles from (-90, 90] degrees so the sign of the
    # flow is learnable; "uniform" draws from the full circle.
    direction_prior: str = "rightward"
    max_attempts: int = 32

    def __post_init__(self):
        if self.direction_prior not in ("rightward", "uniform"):
            raise ValueError(f"unknown direction_prior {self.direction_prior!r}")
        if self.min_sprites < 0 or self.max_sprites < self.min_sprites:
            raise ValueError("need 0 <= min_sprites <= max_sprites")
        if self.sprite_min_size < 2 or self.sprite_max_size < self.sprite_min_size:
            raise ValueError("need 2 <= sprite_min_size <= sprite_max_size")


@dataclass
class BlurSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    gt_flow: np.ndarray  # (H, W, 2) float32, first -> last
    n_subframes: int
    s_max_actual: float


def num_subframes(s: float) -> int:
    if s < 0 or not math.isfinite(s):
        raise ValueError(f"displacement magnitude must be finite and >= 0, got {s}")
    return int(math.ceil(max(s, MIN_SUBFRAMES)))


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

NOISE_PERIOD = 64  # lattice cells per axis before the texture repeats


def _value_noise(seed: int, x: np.ndarray, y: np.ndarray, cells: tuple, weights: tuple) -> np.ndarray:
    """Multi-octave periodic value noise: random RGB lattices, bilinearly interpolated."""
    rng = np.random.default_rng(seed)
    out = np.zeros(x.shape + (3,))
    for cell, weight in zip(cells, weights):
        lattice = rng.uniform(0.0, 1.0, size=(NOISE_PERIOD, NOISE_PERIOD, 3))
        gx, gy = x / cell, y / cell
        x0, y0 = np.floor(gx).astype(int), np.floor(gy).astype(int)
        fx, fy = (gx - x0)[..., None], (gy - y0)[..., None]
        x0, y0 = x0 % NOISE_PERIOD, y0 % NOISE_PERIOD
        x1, y1 = (x0 + 1) % NOISE_PERIOD, (y0 + 1) % NOISE_PERIOD
        top = (1 - fx) * lattice[y0, x0] + fx * lattice[y0, x1]
        bottom = (1 - fx) * lattice[y1, x0] + fx * lattice[y1, x1]
        out += weight * ((1 - fy) * top + fy * bottom)
    return out / sum(weights)


def _stretch(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # value noise concentrates around 0.5; widen it to use most of [0, 1]
    return np.clip(0.5 + (values - 0.5) * 2.2, 0.0, 1.0) * (hi - lo) + lo


def background_texture(seed: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fine-grained colour texture evaluated at continuous pixel coordinates."""
    return _stretch(_value_noise(seed, x, y, (1.0, 3.0, 8.0), (0.4, 0.35, 0.25)), 0.0, 1.0)


def sprite_texture(sprite: Sprite) -> np.ndarray:
    h, w = sprite.size
    if sprite.color is not None:
        return np.broadcast_to(np.asarray(sprite.color, dtype=np.float64), (h, w, 3)).copy()
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return _stretch(_value_noise(sprite.texture_seed + 7919, x, y, (1.0, 2.0, 5.0), (0.4, 0.35, 0.25)),
                    0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _sample_patch(patch: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (h, w, c) patch at continuous coords, zero outside."""
    h, w = patch.shape[:2]
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    out = np.zeros(px.shape + (patch.shape[2],))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = np.zeros(px.shape + (patch.shape[2],))
            vals[ok] = patch[yy[ok], xx[ok]]
            out += wy * wx * vals
    return out


def _sprite_layers(spec: SceneSpec, t: float):
    """Yield (premultiplied colour, alpha) for each sprite, back to front."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    for sprite in sorted(spec.sprites, key=lambda s: s.depth):
        ox = sprite.start[0] + t * sprite.displacement[0]
        oy = sprite.start[1] + t * sprite.displacement[1]
        h, w = sprite.size
        patch = np.concatenate([sprite_texture(sprite), np.ones((h, w, 1))], axis=2)
        sampled = _sample_patch(patch, xs - ox, ys - oy)
        yield sprite, sampled[..., :3], sampled[..., 3]


def render_frame(spec: SceneSpec, t: float) -> np.ndarray:
    """Sharp (H, W, 3) float64 frame at exposure time ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    if spec.background_seed is None:
        frame = np.broadcast_to(np.asarray(spec.background_color, np.float64),
                                (spec.height, spec.width, 3)).copy()
    else:
        cx = spec.camera_start[0] + t * spec.camera_displacement[0]
        cy = spec.camera_start[1] + t * spec.camera_displacement[1]
        frame = background_texture(spec.background_seed, xs - cx, ys - cy)
    for _, color, alpha in _sprite_layers(spec, t):
        frame = color + (1.0 - alpha[..., None]) * frame
    return frame


def ground_truth_flow(spec: SceneSpec) -> np.ndarray:
    """Displacement of whatever is visible at t=0: topmost sprite, else background."""
    flow = np.empty((spec.height, spec.width, 2))
    flow[...] = spec.camera_displacement
    for sprite, _, alpha in _sprite_layers(spec, 0.0):
        flow[alpha > 0.5] = sprite.displacement
    return flow.astype(np.float32)


def blur_image(spec: SceneSpec, n: int) -> np.ndarray:
    times = [0.0] if n == 1 else [i / (n - 1) for i in range(n)]
    acc = np.zeros((spec.height, spec.width, 3))
    for t in times:
        acc += render_frame(spec, t)
    return acc / len(times)


def synthesize(spec: SceneSpec) -> BlurSample:
    """Render a blurred sample without applying the discard rule."""
    gt = ground_truth_flow(spec)
    s = float(np.hypot(gt[..., 0].astype(np.float64), gt[..., 1]).max()) if gt.size else 0.0
    n = num_subframes(s)
    image = np.clip(blur_image(spec, n), 0.0, 1.0).astype(np.float32)
    return BlurSample(image=image, gt_flow=gt, n_subframes=n, s_max_actual=s)


# ---------------------------------------------------------------------------
# random scenes and datasets
# ---------------------------------------------------------------------------

def _random_vector(rng, s_max: float, prior: str) -> tuple:
    mag = rng.uniform(0.0, s_max)
    if prior == "rightward":
        angle = rng.uniform(-np.pi / 2, np.pi / 2)
    else:
        angle = rng.uniform(-np.pi, np.pi)
    return (float(mag * np.cos(angle)), float(mag * np.sin(angle)))


def random_scene(rng: np.random.Generator, cfg: SynthConfig) -> SceneSpec:
    h, w = cfg.height, cfg.width
    count = int(rng.integers(cfg.min_sprites, cfg.max_sprites + 1))
    sprites = []
    for depth in range(count):
        sh = int(rng.integers(cfg.sprite_min_size, cfg.sprite_max_size + 1))
        sw = int(rng.integers(cfg.sprite_min_size, cfg.sprite_max_size + 1))
        start = (float(rng.uniform(-sw / 2, w - sw / 2)), float(rng.uniform(-sh / 2, h - sh / 2)))
        sprites.append(Sprite(
            size=(sh, sw), start=start,
            displacement=_random_vector(rng, cfg.s_max, cfg.direction_prior),
            depth=depth, texture_seed=int(rng.integers(2**31)),
        ))
    camera = (0.0, 0.0)
    if rng.uniform() < cfg.camera_prob:
        camera = _random_vector(rng, cfg.camera_s_max, cfg.direction_prior)
    return SceneSpec(
        height=h, width=w, sprites=sprites,
        background_seed=int(rng.integers(2**31)),
        camera_start=(float(rng.uniform(-100, 100)), float(rng.uniform(-100, 100))),
        camera_displacement=camera,
        seed=int(rng.integers(2**31)),
    )


def sample_for_index(master_seed: int, index: int, cfg: SynthConfig) -> BlurSample:
    """Draw scenes from the (seed, index, attempt) stream until one passes the discard rule."""
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([master_seed, index, attempt])
        sample = synthesize(random_scene(rng, cfg))
        if sample.s_max_actual <= cfg.discard_threshold:
            return sample
    raise GenerationError(
        f"all {cfg.max_attempts} candidate scenes for sample {index} (master seed {master_seed}) "
        f"exceeded the discard threshold {cfg.discard_threshold}"
    )


@dataclass
class GeneratedDataset:
    manifest: Path
    s_values: list
    n_values: list

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.s_values)) if self.s_values else 0.0

    @property
    def mean_n(self) -> float:
        return float(np.mean(self.n_values)) if self.n_values else 0.0


def generate_dataset(count: int, out_dir, cfg: SynthConfig, seed: int = 0,
                     workers: int = 1) -> GeneratedDataset:
    """Write ``count`` samples plus ``manifest.txt`` into ``out_dir``.

    Manifest lines are ``image<TAB>flow`` with paths relative to ``out_dir``.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def make(i):
        sample = sample_for_index(seed, i, cfg)
        img_name, flo_name = f"{i:06d}_img.ppm", f"{i:06d}_flow.flo"
        flow_io.write_ppm(out / img_name, sample.image)
        flow_io.write_flo(sample.gt_flow, out / flo_name)
        return f"{img_name}\t{flo_name}\n", sample.s_max_actual, sample.n_subframes

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(make, range(count)))
    else:
        results = [make(i) for i in range(count)]
    manifest = out / "manifest.txt"
    flow_io._atomic_write(manifest, "".join(r[0] for r in results).encode("utf-8"))
    return GeneratedDataset(manifest, [r[1] for r in results], [r[2] for r in results])


def read_manifest(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>flow'")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs
