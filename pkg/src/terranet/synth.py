"""Synthetic urban scenes with exact per-point terrain truth.

Terrain is a sum of Gaussian bumps. Flat-roofed boxes and ellipsoidal tree
crowns sit on it. Each point's ``gt_dtm`` is the terrain height at its plan
position, including roof and canopy points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

GROUND, BUILDING, VEGETATION = 0, 1, 2


@dataclass
class SynthConfig:
    extent: tuple[float, float] = (200.0, 200.0)
    density: float = 4.0  # points / m^2
    base_elevation: float = 100.0
    terrain_bumps: int = 6
    terrain_amplitude: float = 8.0
    terrain_wavelength: float = 80.0
    building_count: int = 12
    building_footprint: tuple[float, float] = (8.0, 24.0)
    building_height: tuple[float, float] = (4.0, 20.0)
    tree_count: int = 30
    tree_crown_radius: tuple[float, float] = (2.0, 5.0)
    tree_height: tuple[float, float] = (5.0, 14.0)
    canopy_hit_fraction: float = 0.7
    facade_density_fraction: float = 0.15
    sensor_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        for name in ("building_footprint", "building_height", "tree_crown_radius", "tree_height"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if min(self.extent) <= 0 or self.density <= 0:
            raise ValueError("extent and density must be positive")
        if self.terrain_amplitude < 0 or self.terrain_wavelength <= 0:
            raise ValueError("terrain amplitude must be >= 0 and wavelength > 0")
        if self.building_count < 0 or self.tree_count < 0 or self.terrain_bumps < 0:
            raise ValueError("object counts must be >= 0")


@dataclass
class TerrainFunction:
    centers: np.ndarray  # (m, 2)
    amplitudes: np.ndarray  # (m,)
    widths: np.ndarray  # (m,) Gaussian sigma in metres
    base: float = 0.0

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.full(np.broadcast(x, y).shape, self.base)
        for (cx, cy), a, s in zip(self.centers, self.amplitudes, self.widths):
            h = h + a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * s * s))
        return h

    @property
    def bound(self) -> float:
        return float(np.sum(np.abs(self.amplitudes)))


@dataclass
class Building:
    x0: float
    y0: float
    x1: float
    y1: float
    roof: float


@dataclass
class Tree:
    cx: float
    cy: float
    crown_radius: float
    crown_center_z: float
    crown_half_height: float


@dataclass
class Scene:
    cloud: PointCloud
    terrain: TerrainFunction
    buildings: list[Building] = field(default_factory=list)
    trees: list[Tree] = field(default_factory=list)


def terrain_function(config: SynthConfig) -> TerrainFunction:
    rng = np.random.default_rng([config.seed, 1])
    m = config.terrain_bumps
    w, h = config.extent
    centers = rng.uniform([0.0, 0.0], [w, h], size=(m, 2))
    amplitudes = config.terrain_amplitude * rng.uniform(-1.0, 1.0, size=m)
    widths = config.terrain_wavelength * rng.uniform(0.35, 0.7, size=m)
    return TerrainFunction(centers, amplitudes, widths, config.base_elevation)


def _place_buildings(config, terrain, rng) -> list[Building]:
    w, h = config.extent
    lo, hi = config.building_footprint
    out: list[Building] = []
    for _ in range(config.building_count):
        for _attempt in range(500):
            bw, bh = rng.uniform(lo, hi, size=2)
            if bw >= w or bh >= h:
                raise ValueError("building footprint does not fit the scene extent")
            x0 = rng.uniform(1.0, w - bw - 1.0) if w - bw > 2 else 0.0
            y0 = rng.uniform(1.0, h - bh - 1.0) if h - bh > 2 else 0.0
            cand = (x0 - 2, y0 - 2, x0 + bw + 2, y0 + bh + 2)
            if all(
                cand[2] <= b.x0 or b.x1 <= cand[0] or cand[3] <= b.y0 or b.y1 <= cand[1]
                for b in out
            ):
                break
        else:
            raise ValueError("cannot place all buildings without overlap; reduce count or footprint")
        gx, gy = np.meshgrid(np.linspace(x0, x0 + bw, 6), np.linspace(y0, y0 + bh, 6))
        roof = float(terrain(gx, gy).max()) + rng.uniform(*config.building_height)
        out.append(Building(x0, y0, x0 + bw, y0 + bh, roof))
    return out


def _place_trees(config, terrain, buildings, rng) -> list[Tree]:
    w, h = config.extent
    out: list[Tree] = []
    for _ in range(config.tree_count):
        for _attempt in range(500):
            rc = rng.uniform(*config.tree_crown_radius)
            if 2 * rc >= min(w, h):
                raise ValueError("tree crown does not fit the scene extent")
            cx = rng.uniform(rc, w - rc)
            cy = rng.uniform(rc, h - rc)
            if all(
                cx + rc <= b.x0 or b.x1 <= cx - rc or cy + rc <= b.y0 or b.y1 <= cy - rc
                for b in buildings
            ):
                break
        else:
            raise ValueError("cannot place trees clear of buildings; reduce counts")
        height = rng.uniform(*config.tree_height)
        half = min(1.2 * rc, 0.5 * height)
        zc = float(terrain(cx, cy)) + height - half
        out.append(Tree(cx, cy, rc, zc, half))
    return out


def _spectra(labels: np.ndarray, rng) -> np.ndarray:
    n = len(labels)
    sp = np.empty((n, 3))
    g = labels == GROUND
    b = labels == BUILDING
    v = labels == VEGETATION
    base = rng.uniform(0.25, 0.35, size=g.sum())
    sp[g] = np.column_stack([base + rng.normal(0, 0.02, g.sum()), base, base * 0.9])
    base = rng.uniform(0.4, 0.6, size=b.sum())
    sp[b] = np.column_stack([base + rng.normal(0, 0.02, b.sum()), base, base])
    sp[v] = np.column_stack(
        [rng.uniform(0.6, 0.9, v.sum()), rng.uniform(0.08, 0.2, v.sum()), rng.uniform(0.3, 0.5, v.sum())]
    )
    return np.clip(sp, 0.0, 1.0)


def generate_scene(config: SynthConfig) -> Scene:
    """Scene plus the terrain and objects that produced it."""
    terrain = terrain_function(config)
    rng = np.random.default_rng([config.seed, 2])
    buildings = _place_buildings(config, terrain, rng)
    trees = _place_trees(config, terrain, buildings, rng)

    w, h = config.extent
    n = int(round(config.density * w * h))
    xy = rng.uniform([0.0, 0.0], [w, h], size=(n, 2))
    x, y = xy[:, 0], xy[:, 1]
    ground = terrain(x, y)
    z = ground + rng.normal(0.0, config.sensor_noise, n)
    labels = np.full(n, GROUND, dtype=np.int8)

    hit = rng.uniform(size=n) < config.canopy_hit_fraction
    for t in trees:
        d2 = (x - t.cx) ** 2 + (y - t.cy) ** 2
        inside = hit & (d2 < t.crown_radius**2)
        top = t.crown_center_z + t.crown_half_height * np.sqrt(
            np.clip(1.0 - d2[inside] / t.crown_radius**2, 0.0, 1.0)
        )
        top = np.maximum(top, ground[inside])
        upd = top > np.where(labels[inside] == VEGETATION, z[inside], -np.inf)
        idx = np.nonzero(inside)[0][upd]
        z[idx] = top[upd]
        labels[idx] = VEGETATION

    for b in buildings:
        inside = (x >= b.x0) & (x < b.x1) & (y >= b.y0) & (y < b.y1)
        z[inside] = b.roof
        labels[inside] = BUILDING

    # facades: points on the four walls between the terrain and the roof
    fx, fy, fz = [], [], []
    for b in buildings:
        perim = 2 * ((b.x1 - b.x0) + (b.y1 - b.y0))
        wall_area = perim * (b.roof - float(terrain((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2)))
        m = int(round(config.density * config.facade_density_fraction * max(wall_area, 0.0)))
        s = rng.uniform(0.0, perim, m)
        bw, bh = b.x1 - b.x0, b.y1 - b.y0
        px = np.select(
            [s < bw, s < bw + bh, s < 2 * bw + bh],
            [b.x0 + s, np.full(m, b.x1), b.x1 - (s - bw - bh)],
            np.full(m, b.x0),
        )
        py = np.select(
            [s < bw, s < bw + bh, s < 2 * bw + bh],
            [np.full(m, b.y0), b.y0 + (s - bw), np.full(m, b.y1)],
            b.y1 - (s - 2 * bw - bh),
        )
        px = np.clip(px, 0.0, w)
        py = np.clip(py, 0.0, h)
        base = terrain(px, py)
        fx.append(px)
        fy.append(py)
        fz.append(base + rng.uniform(0.0, 1.0, m) * (b.roof - base))
    if fx:
        x = np.concatenate([x, *fx])
        y = np.concatenate([y, *fy])
        z = np.concatenate([z, *fz])
        labels = np.concatenate([labels, np.full(sum(len(a) for a in fx), BUILDING, dtype=np.int8)])

    spectral = _spectra(labels, rng)
    gt = terrain(x, y)
    # the declared plan extent, so the split line sits exactly at mid-width
    scene_extent = (np.array([0.0, 0.0, z.min()]), np.array([w, h, z.max()]))
    cloud = PointCloud.from_raw(np.column_stack([x, y, z]), spectral, gt, scene_extent, labels)
    return Scene(cloud, terrain, buildings, trees)


def gen_scene(config: SynthConfig) -> PointCloud:
    return generate_scene(config).cloud


def split_scene(cloud: PointCloud) -> tuple[PointCloud, PointCloud]:
    """Cut at the mid-x line; both halves keep the full scene's datum and extent."""
    lo, hi = cloud.extent
    mid = 0.5 * (lo[0] + hi[0])
    left = cloud.xyz[:, 0] < mid
    return cloud.subset(left), cloud.subset(~left)


def gen_split(config: SynthConfig) -> tuple[PointCloud, PointCloud]:
    return split_scene(gen_scene(config))
