"""Planar articulated arm composited over procedural backgrounds.

Coordinates are in pixels with ``x`` along columns and ``y`` along rows
(pointing down).  Pixel ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Inconsistent arm geometry or joint configuration."""


@dataclass(frozen=True)
class ArmGeometry:
    link_lengths: tuple[float, ...] = (28.0, 22.0, 14.0, 9.0)
    link_widths: tuple[float, ...] = (15.0, 12.0, 9.0, 8.0)
    base_anchor: tuple[float, float] = (66.0, 56.0)
    base_orientation: float = -2.2
    body_color: tuple[tuple[float, float, float], ...] = (
        (0.93, 0.93, 0.95),
        (0.86, 0.87, 0.92),
        (0.62, 0.66, 0.78),
        (0.22, 0.22, 0.28),
    )

    def __post_init__(self):
        n = len(self.link_lengths)
        if len(self.link_widths) != n or len(self.body_color) != n:
            raise ConfigurationError("link_lengths, link_widths and body_color must have equal counts")
        if n == 0:
            raise ConfigurationError("arm needs at least one link")
        if any(v < 0 for v in self.link_lengths):
            raise ConfigurationError("link lengths must be nonnegative")
        if any(v <= 0 for v in self.link_widths):
            raise ConfigurationError("link widths must be strictly positive")
        for rgb in self.body_color:
            if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
                raise ConfigurationError(f"body colour {rgb} is not an RGB triple in [0, 1]")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)


@dataclass(frozen=True)
class BackgroundStyle:
    """Two horizontal stripes plus a handful of random rectangles and ellipses."""

    split_range: tuple[float, float] = (0.35, 0.65)
    upper_range: tuple[float, float] = (0.35, 0.95)
    lower_range: tuple[float, float] = (0.05, 0.65)
    upper_color: tuple[float, float, float] | None = None
    lower_color: tuple[float, float, float] | None = None
    min_shapes: int = 3
    max_shapes: int = 10
    size_range: tuple[float, float] = (0.08, 0.45)

    def __post_init__(self):
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError("need 0 <= min_shapes <= max_shapes")
        for name in ("split_range", "upper_range", "lower_range", "size_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigurationError(f"{name} must satisfy 0 <= lo <= hi <= 1")


# Joint ranges of the four babbled joints (radians).
DEFAULT_JOINT_RANGES = ((-1.0, 1.0), (-1.0, 0.0), (0.0, 1.0), (-1.0, 1.0))


@dataclass(frozen=True)
class SceneConfig:
    geometry: ArmGeometry = field(default_factory=ArmGeometry)
    joint_ranges: tuple[tuple[float, float], ...] = DEFAULT_JOINT_RANGES
    render_dims: tuple[int, int] = (48, 64)
    downsample: int = 2
    background: BackgroundStyle = field(default_factory=BackgroundStyle)
    mask_reduce: str = "all"

    def __post_init__(self):
        if len(self.joint_ranges) != self.geometry.n_joints:
            raise ConfigurationError(f"{len(self.joint_ranges)} joint ranges for a {self.geometry.n_joints}-link arm")
        for lo, hi in self.joint_ranges:
            if lo > hi:
                raise ConfigurationError(f"joint range [{lo}, {hi}] is reversed")
        h, w = self.render_dims
        if h <= 0 or w <= 0:
            raise ConfigurationError("render dims must be positive")
        if self.downsample < 1 or h % self.downsample or w % self.downsample:
            raise ConfigurationError(f"downsample factor {self.downsample} must divide {self.render_dims}")
        if self.mask_reduce not in ("all", "any"):
            raise ConfigurationError("mask_reduce must be 'all' or 'any'")

    @property
    def image_dims(self) -> tuple[int, int]:
        h, w = self.render_dims
        return h // self.downsample, w // self.downsample

    @property
    def ranges(self) -> np.ndarray:
        return np.asarray(self.joint_ranges, dtype=np.float64)


@dataclass
class RenderedScene:
    image: np.ndarray       # (H, W, 3) in [0, 1]
    body_mask: np.ndarray   # (H, W, 3) bool, identical across channels
    joint_vector: np.ndarray


def forward_kinematics(joints: Sequence[float], geometry: ArmGeometry) -> np.ndarray:
    """Link segments as an ``(N, 2, 2)`` array of ``(start, end)`` points, base first."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (geometry.n_joints,):
        raise ConfigurationError(f"{joints.shape} joint vector for a {geometry.n_joints}-link arm")
    headings = geometry.base_orientation + np.cumsum(joints)
    steps = np.asarray(geometry.link_lengths)[:, None] * np.stack([np.cos(headings), np.sin(headings)], axis=1)
    points = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)]) + np.asarray(geometry.base_anchor, dtype=np.float64)
    return np.stack([points[:-1], points[1:]], axis=1)


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    length2 = float(d @ d)
    if length2 == 0.0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / length2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def rasterize_arm(segments: np.ndarray, geometry: ArmGeometry, canvas: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Crisp capsule rasterisation.

    A pixel is covered when its center is within half a link width of that
    link's segment; it takes the colour of the nearest covering link.
    Returns the arm layer ``(H, W, 3)`` and the coverage mask ``(H, W, 3)``.
    """
    h, w = canvas
    if h <= 0 or w <= 0:
        raise ConfigurationError("canvas dims must be positive")
    segments = np.asarray(segments, dtype=np.float64)
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    best = np.full((h, w), np.inf)
    owner = np.full((h, w), -1)
    for k, (a, b) in enumerate(segments):
        dist = _segment_distance(px, py, a, b)
        take = (dist <= geometry.link_widths[k] / 2) & (dist < best)
        best[take] = dist[take]
        owner[take] = k
    covered = owner >= 0
    colors = np.asarray(geometry.body_color, dtype=np.float64)
    layer = np.zeros((h, w, 3))
    layer[covered] = colors[owner[covered]]
    return layer, np.repeat(covered[:, :, None], 3, axis=2)


def render_background(seed, canvas: tuple[int, int], style: BackgroundStyle = BackgroundStyle()) -> np.ndarray:
    """Procedural background, a pure function of ``seed``."""
    h, w = canvas
    rng = np.random.default_rng(seed)
    split = int(round(h * rng.uniform(*style.split_range)))
    upper = np.asarray(style.upper_color) if style.upper_color is not None else rng.uniform(*style.upper_range, size=3)
    lower = np.asarray(style.lower_color) if style.lower_color is not None else rng.uniform(*style.lower_range, size=3)
    img = np.empty((h, w, 3))
    img[:split] = upper
    img[split:] = lower
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    for _ in range(rng.integers(style.min_shapes, style.max_shapes + 1)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx = max(0.5 * w * rng.uniform(*style.size_range), 1e-9)
        ry = max(0.5 * h * rng.uniform(*style.size_range), 1e-9)
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            inside = (np.abs(px - cx) <= rx) & (np.abs(py - cy) <= ry)
        else:
            inside = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
        img[inside] = color
    return img


def compose_scene(arm_layer: np.ndarray, coverage: np.ndarray, background: np.ndarray,
                  joints: Sequence[float] | None = None) -> RenderedScene:
    """Paste the arm over the background wherever it covers a component."""
    if not (arm_layer.shape == coverage.shape == background.shape):
        raise ConfigurationError(f"shape mismatch: arm {arm_layer.shape}, coverage {coverage.shape}, background {background.shape}")
    coverage = np.asarray(coverage, dtype=bool)
    image = np.where(coverage, arm_layer, background)
    return RenderedScene(image, coverage.copy(), np.asarray(joints if joints is not None else []))


def render_scene(joints: Sequence[float], config: SceneConfig, background_seed) -> RenderedScene:
    """Full-resolution scene for one pose and one background seed."""
    segments = forward_kinematics(joints, config.geometry)
    layer, coverage = rasterize_arm(segments, config.geometry, config.render_dims)
    background = render_background(background_seed, config.render_dims, config.background)
    return compose_scene(layer, coverage, background, joints)
