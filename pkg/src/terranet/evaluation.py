"""Error metrics, rasterization, raster/PPM output and the radius sweep."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud

log = logging.getLogger(__name__)

NODATA = -9999.0


@dataclass
class Metrics:
    mae: float
    sigma: float
    relative_error: float
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def compute_metrics(truth, pred, gt_max: float) -> Metrics:
    """MAE, population std of the absolute error, and MAE / gt_max."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {truth.shape} vs {pred.shape}")
    if truth.size == 0:
        raise ValueError("no samples")
    if not gt_max > 0:
        raise ValueError(f"gt_max must be positive, got {gt_max}")
    e = np.abs(truth - pred)
    mae = float(e.mean())
    return Metrics(mae, float(e.std()), mae / gt_max, int(e.size))


# ---------------------------------------------------------------------------
# rasters


@dataclass
class TerrainRaster:
    """North-up grid. Row 0 is the northern edge; ``origin`` is the lower-left corner."""

    origin: tuple[float, float]
    cell_size: float
    values: np.ndarray  # (rows, cols)
    nodata: float = NODATA

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("raster values must be 2-D")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        col = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size).astype(np.int64)
        row_up = np.floor((np.asarray(y) - self.origin[1]) / self.cell_size).astype(np.int64)
        col = np.clip(col, 0, self.cols - 1)
        row_up = np.clip(row_up, 0, self.rows - 1)
        return self.rows - 1 - row_up, col

    def sample(self, x, y) -> np.ndarray:
        r, c = self.cell_of(x, y)
        return self.values[r, c]

    def with_values(self, values) -> "TerrainRaster":
        return replace(self, values=np.asarray(values, dtype=np.float64))


def _grid_for(cloud: PointCloud, cell_size: float):
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    raw = cloud.raw_xyz()
    lo = raw[:, :2].min(axis=0)
    hi = raw[:, :2].max(axis=0)
    # the far edge belongs to the last cell
    cols = max(1, int(np.ceil((hi[0] - lo[0]) / cell_size)))
    rows = max(1, int(np.ceil((hi[1] - lo[1]) / cell_size)))
    grid = TerrainRaster((float(lo[0]), float(lo[1])), float(cell_size), np.full((rows, cols), NODATA))
    r, c = grid.cell_of(raw[:, 0], raw[:, 1])
    return grid, r * cols + c


def rasterize_values(cloud: PointCloud, values, cell_size: float, reducer: str = "mean") -> TerrainRaster:
    """Per-cell mean / max / min of a per-point quantity; empty cells are nodata."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(cloud):
        raise ValueError(f"{len(values)} values for {len(cloud)} points")
    grid, flat = _grid_for(cloud, cell_size)
    size = grid.rows * grid.cols
    if reducer == "mean":
        s = np.bincount(flat, weights=values, minlength=size)
        n = np.bincount(flat, minlength=size)
        out = np.full(size, NODATA)
        out[n > 0] = s[n > 0] / n[n > 0]
    elif reducer in ("max", "min"):
        fill = -np.inf if reducer == "max" else np.inf
        out = np.full(size, fill)
        (np.maximum if reducer == "max" else np.minimum).at(out, flat, values)
        out[~np.isfinite(out)] = NODATA
    else:
        raise ValueError(f"unknown reducer {reducer!r}")
    return grid.with_values(out.reshape(grid.rows, grid.cols))


def rasterize_dsm(cloud: PointCloud, cell_size: float) -> TerrainRaster:
    """Uppermost surface: highest raw z per cell."""
    return rasterize_values(cloud, cloud.raw_xyz()[:, 2], cell_size, "max")


def write_ascii_grid(raster: TerrainRaster, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {raster.cols}\n")
        fh.write(f"nrows {raster.rows}\n")
        fh.write(f"xllcorner {raster.origin[0]!r}\n")
        fh.write(f"yllcorner {raster.origin[1]!r}\n")
        fh.write(f"cellsize {raster.cell_size!r}\n")
        fh.write(f"NODATA_value {raster.nodata!r}\n")
        np.savetxt(fh, raster.values, fmt="%.17g")


def read_ascii_grid(path) -> TerrainRaster:
    header = {}
    with open(path, encoding="utf-8") as fh:
        for _ in range(6):
            key, val = fh.readline().split()
            header[key.lower()] = float(val)
        values = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    rows, cols = int(header["nrows"]), int(header["ncols"])
    if values.shape != (rows, cols):
        raise ValueError(f"{path}: expected {rows}x{cols} grid, found {values.shape}")
    return TerrainRaster(
        (header["xllcorner"], header["yllcorner"]),
        header["cellsize"],
        values,
        header.get("nodata_value", NODATA),
    )


def _colormap(t: np.ndarray) -> np.ndarray:
    # blue -> cyan -> yellow -> red
    stops = np.array([[0, 0, 160], [0, 200, 220], [250, 230, 0], [220, 20, 20]], dtype=np.float64)
    pos = np.clip(t, 0.0, 1.0) * (len(stops) - 1)
    i = np.minimum(pos.astype(int), len(stops) - 2)
    f = (pos - i)[..., None]
    return stops[i] * (1 - f) + stops[i + 1] * f


def write_ppm(raster: TerrainRaster, path, color: bool = True) -> None:
    """Binary P6 image, linear min-max stretch over valid cells, nodata black."""
    valid = raster.valid
    v = raster.values
    img = np.zeros(v.shape + (3,), dtype=np.uint8)
    if valid.any():
        lo, hi = v[valid].min(), v[valid].max()
        t = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
        rgb = _colormap(t) if color else np.repeat((t * 255.0)[..., None], 3, axis=-1)
        img[valid] = np.clip(np.round(rgb[valid]), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{raster.cols} {raster.rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a P6 image")
    w, h = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the pixels
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# experiments


def truth_max(cloud: PointCloud) -> float:
    """Maximum of the datum-shifted truth DTM (the relative-error denominator)."""
    return float(np.max(cloud.gt_dtm))


def evaluate_predictions(cloud: PointCloud, pred_raw) -> Metrics:
    return compute_metrics(cloud.raw_gt(), pred_raw, truth_max(cloud))


def radius_sweep(train_cloud: PointCloud, test_cloud: PointCloud, radii, net_config, train_config):
    """Train one network per radius (all else equal) and score it on the test cloud."""
    from .pipeline import SceneIndex, infer_scene, make_training_set, train

    radii = [float(r) for r in radii]
    if len(set(radii)) != len(radii) or any(r <= 0 for r in radii):
        raise ValueError(f"radii must be distinct and positive: {radii}")
    train_index = SceneIndex.build(train_cloud)
    test_index = SceneIndex.build(test_cloud)
    rows = []
    for r in radii:
        cfg = replace(train_config, radius=r)
        tr, va = make_training_set(train_cloud, cfg, train_index)
        params, _ = train(tr, va, net_config, cfg)
        pred = infer_scene(test_cloud, params, cfg, test_index)
        m = evaluate_predictions(test_cloud, pred)
        log.info("radius %.1f m: MAE %.3f sigma %.3f", r, m.mae, m.sigma)
        rows.append((r, m))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("radius,mae,sigma,relative_error,n\n")
        for r, m in rows:
            fh.write(f"{r!r},{m.mae!r},{m.sigma!r},{m.relative_error!r},{m.n}\n")
