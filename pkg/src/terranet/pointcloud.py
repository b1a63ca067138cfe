"""Point-cloud container, xyz-text / binary-tile I/O and the 10-D point features."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FEATURES = 10
FEATURE_NAMES = ("x", "y", "z", "ir", "r", "g", "ndvi", "xn", "yn", "zn")

TILE_MAGIC = b"PCT1"


class CloudFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    """Points stored column-wise.

    ``xyz`` is datum-shifted (the datum is subtracted from z and from
    ``gt_dtm``). ``extent`` is the (min, max) box used for scene
    normalization; it equals the cloud bounds unless the cloud is one part of
    a larger scene.
    """

    xyz: np.ndarray  # (n, 3) float64
    spectral: np.ndarray  # (n, 3) ir, r, g in [0, 1]
    gt_dtm: np.ndarray | None = None  # (n,) datum-shifted, NaN where unknown
    datum_offset: float = 0.0
    extent: tuple[np.ndarray, np.ndarray] | None = None
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        self.spectral = np.ascontiguousarray(self.spectral, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise CloudFormatError(f"xyz must be (n, 3), got {self.xyz.shape}")
        if self.spectral.shape != self.xyz.shape:
            raise CloudFormatError("spectral must be (n, 3) like xyz")
        if self.gt_dtm is not None:
            self.gt_dtm = np.asarray(self.gt_dtm, dtype=np.float64)
        if not np.all(np.isfinite(self.xyz)):
            raise CloudFormatError("non-finite coordinates")
        if self.extent is None and len(self):
            self.extent = self.bounds

    @classmethod
    def from_raw(
        cls,
        xyz,
        spectral,
        gt_dtm=None,
        scene_extent: tuple[np.ndarray, np.ndarray] | None = None,
        labels=None,
    ) -> "PointCloud":
        """Build a cloud from un-shifted coordinates, applying the datum shift.

        With ``scene_extent`` (raw coordinates of the enclosing scene), the
        datum is the scene minimum z and normalization uses the scene box;
        otherwise both come from this cloud alone.
        """
        xyz = np.array(xyz, dtype=np.float64, copy=True)
        if len(xyz) == 0:
            raise CloudFormatError("empty point cloud")
        if scene_extent is None:
            lo, hi = xyz.min(axis=0), xyz.max(axis=0)
        else:
            lo = np.asarray(scene_extent[0], dtype=np.float64)
            hi = np.asarray(scene_extent[1], dtype=np.float64)
        datum = float(lo[2])
        xyz[:, 2] -= datum
        gt = None
        if gt_dtm is not None:
            gt = np.asarray(gt_dtm, dtype=np.float64) - datum
        shift = np.array([0.0, 0.0, datum])
        return cls(xyz, spectral, gt, datum, (lo - shift, hi - shift), labels)

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def point_count(self) -> int:
        return len(self.xyz)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.xyz.min(axis=0), self.xyz.max(axis=0)

    @property
    def has_truth(self) -> bool:
        return self.gt_dtm is not None and bool(np.all(np.isfinite(self.gt_dtm)))

    def raw_xyz(self) -> np.ndarray:
        out = self.xyz.copy()
        out[:, 2] += self.datum_offset
        return out

    def raw_gt(self) -> np.ndarray | None:
        return None if self.gt_dtm is None else self.gt_dtm + self.datum_offset

    def raw_extent(self) -> tuple[np.ndarray, np.ndarray]:
        shift = np.array([0.0, 0.0, self.datum_offset])
        return self.extent[0] + shift, self.extent[1] + shift

    def subset(self, mask_or_idx) -> "PointCloud":
        """Sub-cloud sharing this cloud's datum and scene extent."""
        gt = None if self.gt_dtm is None else self.gt_dtm[mask_or_idx]
        labels = None if self.labels is None else self.labels[mask_or_idx]
        return PointCloud(
            self.xyz[mask_or_idx],
            self.spectral[mask_or_idx],
            gt,
            self.datum_offset,
            self.extent,
            labels,
        )


# ---------------------------------------------------------------------------
# features


def ndvi(ir, r):
    """(ir - r) / (ir + r), 0 where both are 0. Works on scalars and arrays."""
    ir = np.asarray(ir, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(ir < 0) or np.any(r < 0):
        raise ValueError("ndvi inputs must be non-negative")
    s = ir + r
    out = np.divide(ir - r, s, out=np.zeros(np.broadcast(ir, r).shape), where=s > 0)
    return float(out) if out.ndim == 0 else out


def scene_normalize(cloud: PointCloud, idx=None) -> np.ndarray:
    """Min-max map of the coordinates to [0, 1] over the scene extent.

    A degenerate axis maps to 0.
    """
    lo, hi = cloud.extent
    span = hi - lo
    xyz = cloud.xyz if idx is None else cloud.xyz[idx]
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (xyz - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def point_attributes(cloud: PointCloud) -> np.ndarray:
    """Per-point channels that do not depend on the block: ir, r, g, ndvi, xn, yn, zn."""
    sp = cloud.spectral
    return np.column_stack(
        [sp, ndvi(sp[:, 0], sp[:, 1]), scene_normalize(cloud)]
    )


def build_feature_matrix(
    cloud: PointCloud,
    idx,
    xyz: np.ndarray | None = None,
    attributes: np.ndarray | None = None,
) -> np.ndarray:
    """N x 10 features for the points ``idx``; rows follow ``idx`` order.

    The first three columns are coordinates minus the centroid of the selected
    points. ``xyz`` overrides the coordinates (e.g. augmented copies);
    ``attributes`` may pass a precomputed :func:`point_attributes` table.
    """
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("empty index list")
    coords = cloud.xyz[idx] if xyz is None else np.asarray(xyz, dtype=np.float64)
    centered = coords - coords.mean(axis=0)
    attrs = point_attributes(cloud)[idx] if attributes is None else attributes[idx]
    return np.column_stack([centered, attrs])


# ---------------------------------------------------------------------------
# I/O


def _parse_header(line: str, header: dict) -> None:
    parts = line.lstrip("#").split()
    if not parts:
        return
    key = parts[0]
    try:
        if key == "spectral_range":
            header["spectral_range"] = float(parts[1])
        elif key == "scene_extent":
            vals = [float(v) for v in parts[1:7]]
            if len(vals) != 6:
                raise IndexError
            header["scene_extent"] = (np.array(vals[:3]), np.array(vals[3:]))
        elif key == "columns":
            header["columns"] = parts[1:]
    except (IndexError, ValueError):
        raise CloudFormatError(f"malformed header line: {line.strip()!r}") from None


def read_xyz_table(path) -> tuple[np.ndarray, list[str], dict]:
    """Parse an xyz-text file into (table, column names, header)."""
    header: dict = {}
    rows = []
    ncols = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                _parse_header(s, header)
                continue
            parts = s.split()
            if len(parts) < 6:
                raise CloudFormatError(
                    f"{path}:{lineno}: expected at least 6 columns (x y z ir r g), got {len(parts)}"
                )
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise CloudFormatError(
                    f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    names = header.get("columns") or ["x", "y", "z", "ir", "r", "g", "gt_dtm"][:ncols]
    if len(names) < ncols:
        names = names + [f"col{i}" for i in range(len(names), ncols)]
    return np.array(rows, dtype=np.float64), names[:ncols], header


def read_xyz_text(path) -> PointCloud:
    data, names, header = read_xyz_table(path)
    scale = header.get("spectral_range", 1.0)
    if scale <= 0:
        raise CloudFormatError(f"{path}: spectral_range must be positive")
    gt = data[:, names.index("gt_dtm")] if "gt_dtm" in names else None
    return PointCloud.from_raw(
        data[:, :3], np.clip(data[:, 3:6] / scale, 0.0, 1.0), gt, header.get("scene_extent")
    )


def write_xyz_text(cloud: PointCloud, path, extra: np.ndarray | None = None, extra_name: str = "") -> None:
    """Write raw (datum-restored) coordinates; spectra are written in [0, 1].

    ``extra`` appends one more column (e.g. predictions).
    """
    raw = cloud.raw_xyz()
    cols = [raw, cloud.spectral]
    names = "x y z ir r g"
    gt = cloud.raw_gt()
    if gt is not None:
        cols.append(gt[:, None])
        names += " gt_dtm"
    if extra is not None:
        cols.append(np.asarray(extra, dtype=np.float64)[:, None])
        names += f" {extra_name}"
    table = np.hstack(cols)
    lo, hi = cloud.raw_extent()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# columns {names}\n")
        fh.write("# spectral_range 1\n")
        fh.write("# scene_extent " + " ".join(repr(float(v)) for v in (*lo, *hi)) + "\n")
        np.savetxt(fh, table, fmt="%.17g")


def read_binary_tile(path) -> PointCloud:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != TILE_MAGIC:
        raise CloudFormatError(f"{path}: not a PCT1 tile")
    (n,) = struct.unpack_from("<Q", blob, 4)
    if n == 0:
        raise CloudFormatError(f"{path}: no points")
    need = 12 + n * 7 * 8
    if len(blob) != need:
        raise CloudFormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", offset=12).reshape(n, 7)
    gt = data[:, 6]
    if np.all(np.isnan(gt)):
        gt = None
    return PointCloud.from_raw(data[:, :3], data[:, 3:6], gt)


def write_binary_tile(cloud: PointCloud, path) -> None:
    gt = cloud.raw_gt()
    if gt is None:
        gt = np.full(len(cloud), np.nan)
    table = np.column_stack([cloud.raw_xyz(), cloud.spectral, gt]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(TILE_MAGIC)
        fh.write(struct.pack("<Q", len(cloud)))
        fh.write(table.tobytes())


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Load ``xyz-text`` or ``binary-tile``; the format is sniffed when omitted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        with open(path, "rb") as fh:
            format = "binary-tile" if fh.read(4) == TILE_MAGIC else "xyz-text"
    if format == "xyz-text":
        return read_xyz_text(path)
    if format == "binary-tile":
        return read_binary_tile(path)
    raise ValueError(f"unknown point-cloud format {format!r}")


def write_cloud(cloud: PointCloud, path, format: str = "xyz-text") -> None:
    if format == "xyz-text":
        write_xyz_text(cloud, path)
    elif format == "binary-tile":
        write_binary_tile(cloud, path)
    else:
        raise ValueError(f"unknown point-cloud format {format!r}")
