"""Geographic coordinates, sinusoidal position features, sphere-uniform
sampling, raster grids, and environmental covariate stacks.

All types are immutable after construction and safe for concurrent reads.
Rasters are row-major with row 0 at the north edge, columns west to east.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

_STD_FLOOR = 1e-6


def wrap_lon(lon: float) -> float:
    """Wrap a longitude into (-180, 180]; exact for already-in-range values."""
    r = math.fmod(lon, 360.0)
    if r > 180.0:
        r -= 360.0
    elif r <= -180.0:
        r += 360.0
    return r + 0.0  # normalize -0.0


@dataclass(frozen=True)
class GeoPoint:
    """Latitude/longitude in degrees; lon wrapped into (-180, 180] on build."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ConfigError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", wrap_lon(self.lon))


@dataclass(frozen=True)
class BBox:
    """Geographic bounds in degrees; north > south, east > west."""

    north: float
    south: float
    west: float
    east: float

    def __post_init__(self):
        if not (self.north > self.south and self.east > self.west):
            raise ConfigError(f"degenerate bbox {self}")

    def contains(self, lat: float, lon: float) -> bool:
        return (self.south <= lat <= self.north) and (self.west <= lon <= self.east)


GLOBAL_BBOX = BBox(north=90.0, south=-90.0, west=-180.0, east=180.0)


@dataclass(frozen=True)
class PositionInput:
    """Model input for one location: 4 sinusoidal features plus optional
    standardized covariates. env_imputed flags out-of-bounds or invalid
    covariate lookups that fell back to layer means."""

    base: np.ndarray
    env: np.ndarray | None = None
    env_imputed: bool = False

    @property
    def vector(self) -> np.ndarray:
        if self.env is None:
            return self.base
        return np.concatenate([self.base, self.env])


def _base_features(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """(N,) lats/lons in degrees -> (N, 4) [sin πx', cos πx', sin πy', cos πy']
    with x' = lon/180, y' = lat/90."""
    xp = np.asarray(lons, dtype=np.float64) / 180.0
    yp = np.asarray(lats, dtype=np.float64) / 90.0
    return np.stack([np.sin(np.pi * xp), np.cos(np.pi * xp),
                     np.sin(np.pi * yp), np.cos(np.pi * yp)], axis=-1)


def encode_position(p: GeoPoint, cov: "CovariateStack | None" = None) -> PositionInput:
    """Sinusoidal features for one point, with covariates appended when given."""
    base = _base_features(np.asarray(p.lat), np.asarray(p.lon))
    if cov is None:
        return PositionInput(base=base)
    env, imputed = cov.sample(p)
    return PositionInput(base=base, env=env, env_imputed=imputed)


def encode_positions(lats: np.ndarray, lons: np.ndarray,
                     cov: "CovariateStack | None" = None) -> np.ndarray:
    """Vectorized encode: (N,) arrays -> (N, 4 + C) float64 feature matrix."""
    base = _base_features(lats, lons)
    if cov is None:
        return base
    env, _ = cov.sample_many(np.asarray(lats), np.asarray(lons))
    return np.concatenate([base, env], axis=1)


def sample_uniform_location(rng: np.random.Generator) -> GeoPoint:
    """One point uniform w.r.t. sphere surface area: lon ~ U(-180,180],
    lat = asin(u) in degrees with u ~ U(-1,1)."""
    lon = rng.uniform(-180.0, 180.0)
    lat = math.degrees(math.asin(rng.uniform(-1.0, 1.0)))
    return GeoPoint(lat=lat, lon=lon)


def sample_uniform_locations(rng: np.random.Generator, n: int
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sphere-uniform sampling -> (lats, lons) arrays of length n."""
    lons = rng.uniform(-180.0, 180.0, size=n)
    lats = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, size=n)))
    return lats, lons


def grid_cell_centers(width: int, height: int, bbox: BBox = GLOBAL_BBOX
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center coordinates: (lats (H,) north->south, lons (W,) west->east)."""
    if width < 1 or height < 1:
        raise ConfigError(f"grid extents must be >= 1, got {width}x{height}")
    cell_h = (bbox.north - bbox.south) / height
    cell_w = (bbox.east - bbox.west) / width
    lats = bbox.north - (np.arange(height) + 0.5) * cell_h
    lons = bbox.west + (np.arange(width) + 0.5) * cell_w
    return lats, lons


def grid_points(width: int, height: int, bbox: BBox = GLOBAL_BBOX) -> list[GeoPoint]:
    """Row-major cell centers, north->south then west->east; matches
    RangeRaster indexing."""
    lats, lons = grid_cell_centers(width, height, bbox)
    return [GeoPoint(lat=la, lon=lo) for la in lats for lo in lons]


@dataclass
class RangeRaster:
    """Per-cell score/probability grid. values is row-major (H*W,), row 0 at
    the north edge; valid_mask marks cells that carry a meaningful value."""

    width: int
    height: int
    bbox: BBox
    values: np.ndarray
    valid_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("raster extents must be >= 1")
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        n = self.width * self.height
        if self.values.size != n:
            raise ConfigError(f"values length {self.values.size} != W*H = {n}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(n, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(-1)
            if self.valid_mask.size != n:
                raise ConfigError("valid_mask length mismatch")
        if not np.all(np.isfinite(self.values[self.valid_mask])):
            raise ConfigError("non-finite values on valid cells")

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)

    def save(self, path) -> None:
        write_raster(self, path)

    @staticmethod
    def load(path) -> "RangeRaster":
        return read_raster(path)


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------

class CovariateStack:
    """C named raster layers on one grid with per-layer standardization stats.

    Lookups are nearest-cell; sampled values are standardized as
    (value - mean) / std with std floored at 1e-6. Statistics come from the
    file header when loaded, or are computed over finite cells at build time.
    """

    def __init__(self, names: list[str], layers: np.ndarray, bbox: BBox,
                 width: int, height: int,
                 means: np.ndarray | None = None, stds: np.ndarray | None = None):
        layers = np.asarray(layers, dtype=np.float32)
        if layers.ndim != 2 or layers.shape[0] != len(names):
            raise ConfigError("layers must be (C, W*H) matching names")
        if layers.shape[1] != width * height:
            raise ConfigError("layer size does not match grid")
        self.names = list(names)
        self.layers = layers
        self.bbox = bbox
        self.width = width
        self.height = height
        if means is None or stds is None:
            means = np.empty(len(names))
            stds = np.empty(len(names))
            for i, layer in enumerate(layers):
                finite = layer[np.isfinite(layer)]
                means[i] = finite.mean() if finite.size else 0.0
                stds[i] = max(float(finite.std()) if finite.size else 0.0, _STD_FLOOR)
        self.means = np.asarray(means, dtype=np.float64)
        self.stds = np.maximum(np.asarray(stds, dtype=np.float64), _STD_FLOOR)

    @property
    def channels(self) -> int:
        return len(self.names)

    def _cell_index(self, lat: float, lon: float) -> int:
        b = self.bbox
        row = int((b.north - lat) / (b.north - b.south) * self.height)
        col = int((lon - b.west) / (b.east - b.west) * self.width)
        row = min(max(row, 0), self.height - 1)
        col = min(max(col, 0), self.width - 1)
        return row * self.width + col

    def sample(self, p: GeoPoint) -> tuple[np.ndarray, bool]:
        """Standardized covariates at p -> (C,), plus an imputation flag.
        Out-of-bbox points and non-finite cells read as the layer mean."""
        if not self.bbox.contains(p.lat, p.lon):
            return np.zeros(self.channels), True
        idx = self._cell_index(p.lat, p.lon)
        raw = self.layers[:, idx].astype(np.float64)
        bad = ~np.isfinite(raw)
        raw[bad] = self.means[bad]
        return (raw - self.means) / self.stds, bool(bad.any())

    def sample_many(self, lats: np.ndarray, lons: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized sample -> ((N, C) standardized values, (N,) imputed flags)."""
        b = self.bbox
        inside = ((lats >= b.south) & (lats <= b.north)
                  & (lons >= b.west) & (lons <= b.east))
        rows = np.clip(((b.north - lats) / (b.north - b.south)
                        * self.height).astype(np.int64), 0, self.height - 1)
        cols = np.clip(((lons - b.west) / (b.east - b.west)
                        * self.width).astype(np.int64), 0, self.width - 1)
        raw = self.layers[:, rows * self.width + cols].T.astype(np.float64)
        bad = ~np.isfinite(raw)
        raw[bad] = np.broadcast_to(self.means, raw.shape)[bad]
        out = (raw - self.means) / self.stds
        out[~inside] = 0.0
        return out, (~inside) | bad.any(axis=1)

    def save(self, path) -> None:
        write_covariates(self, path)

    @staticmethod
    def load(path) -> "CovariateStack":
        return read_covariates(path)


# ---------------------------------------------------------------------------
# Binary formats (little-endian throughout)
# ---------------------------------------------------------------------------

_RASTER_MAGIC = b"LESR"
_COV_MAGIC = b"LESC"


def _expect_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}",
                          offset=0)


def _bbox_bytes(bbox: BBox) -> bytes:
    return struct.pack("<4d", bbox.north, bbox.south, bbox.west, bbox.east)


def _read_bbox(buf: bytes, off: int) -> BBox:
    n, s, w, e = struct.unpack_from("<4d", buf, off)
    return BBox(north=n, south=s, west=w, east=e)


def raster_to_bytes(raster: RangeRaster) -> bytes:
    """Raster wire/file layout: magic 'LESR', version u16, W u32, H u32,
    bbox 4xf64 (north, south, west, east), W*H f32 values, W*H u8 mask."""
    parts = [_RASTER_MAGIC,
             struct.pack("<HII", 1, raster.width, raster.height),
             _bbox_bytes(raster.bbox),
             raster.values.astype("<f4").tobytes(),
             raster.valid_mask.astype(np.uint8).tobytes()]
    return b"".join(parts)


def raster_from_bytes(buf: bytes, source="<bytes>") -> RangeRaster:
    _expect_magic(buf, _RASTER_MAGIC, source)
    version, w, h = struct.unpack_from("<HII", buf, 4)
    if version != 1:
        raise FormatError(f"{source}: unsupported raster version {version}",
                          offset=4)
    bbox = _read_bbox(buf, 14)
    n = w * h
    off = 14 + 32
    end = off + 4 * n
    if len(buf) < end + n:
        raise FormatError(f"{source}: truncated raster payload",
                          offset=len(buf))
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=end).astype(bool)
    return RangeRaster(width=w, height=h, bbox=bbox, values=values.copy(),
                       valid_mask=mask)


def write_raster(raster: RangeRaster, path) -> None:
    with open(path, "wb") as f:
        f.write(raster_to_bytes(raster))


def read_raster(path) -> RangeRaster:
    with open(path, "rb") as f:
        buf = f.read()
    return raster_from_bytes(buf, source=str(path))


def write_covariates(stack: CovariateStack, path) -> None:
    """Covariate file: magic 'LESC', version u16, W u32, H u32, bbox 4xf64,
    layer count u16; per layer: name len u16 + UTF-8 name, mean f64, std f64,
    W*H f32 row-major north->south."""
    with open(path, "wb") as f:
        f.write(_COV_MAGIC)
        f.write(struct.pack("<HII", 1, stack.width, stack.height))
        f.write(_bbox_bytes(stack.bbox))
        f.write(struct.pack("<H", stack.channels))
        for i, name in enumerate(stack.names):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<dd", float(stack.means[i]), float(stack.stds[i])))
            f.write(stack.layers[i].astype("<f4").tobytes())


def read_covariates(path) -> CovariateStack:
    with open(path, "rb") as f:
        buf = f.read()
    _expect_magic(buf, _COV_MAGIC, path)
    version, w, h = struct.unpack_from("<HII", buf, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported covariate version {version}", offset=4)
    bbox = _read_bbox(buf, 14)
    (count,) = struct.unpack_from("<H", buf, 46)
    off = 48
    names, means, stds, layers = [], [], [], []
    n = w * h
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        names.append(buf[off:off + name_len].decode("utf-8"))
        off += name_len
        mean, std = struct.unpack_from("<dd", buf, off)
        off += 16
        if len(buf) < off + 4 * n:
            raise FormatError(f"{path}: truncated covariate layer", offset=len(buf))
        layers.append(np.frombuffer(buf, dtype="<f4", count=n, offset=off).copy())
        off += 4 * n
        means.append(mean)
        stds.append(std)
    return CovariateStack(names=names, layers=np.stack(layers) if layers else
                          np.zeros((0, n), dtype=np.float32),
                          bbox=bbox, width=w, height=h,
                          means=np.array(means), stds=np.array(stds))
