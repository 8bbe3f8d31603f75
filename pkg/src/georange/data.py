"""Dataset ingestion and generation: observation stores, text-embedding
stores, per-iteration section sampling, the synthetic benchmark world, and
the external embedding-service client.

File formats (little-endian):
  observations CSV    header `species_id,lat,lon`, one record per line
  observations binary magic 'LESO', version u16, count u64,
                      records of (u32 species_id, f32 lat, f32 lon)
  embedding store     magic 'LESE', version u16, dim u32, count u64; per
                      record u32 species_id, u32 section_id, u8 kind,
                      dim x f32
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import threading
import time
import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigError, FormatError
from .geo import (BBox, CovariateStack, GeoPoint, GLOBAL_BBOX, RangeRaster,
                  grid_cell_centers)

log = logging.getLogger(__name__)

_OBS_MAGIC = b"LESO"
_EMB_MAGIC = b"LESE"


@dataclass(frozen=True)
class ObservationRecord:
    species_id: int
    location: GeoPoint


class TextKind(IntEnum):
    SECTION = 0
    HABITAT_SUMMARY = 1
    RANGE_SUMMARY = 2


@dataclass(frozen=True)
class TextEmbeddingRecord:
    species_id: int
    section_id: int
    kind: TextKind
    vector: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ConfigError(
                f"non-finite embedding for species {self.species_id}")


@dataclass
class DatasetManifest:
    """Per-species accounting for one training split."""

    species_counts: dict[int, int]          # post-cap counts, training species
    pre_counts: dict[int, int]              # counts before capping/drops
    held_out: list[int]
    cap: int

    @property
    def species_ids(self) -> list[int]:
        return sorted(self.species_counts)

    @property
    def num_species(self) -> int:
        return len(self.species_counts)

    @property
    def num_observations(self) -> int:
        return sum(self.species_counts.values())


def obs_arrays(records: list[ObservationRecord]
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, lats, lons) arrays for vectorized consumers."""
    ids = np.fromiter((r.species_id for r in records), dtype=np.int64,
                      count=len(records))
    lats = np.fromiter((r.location.lat for r in records), dtype=np.float64,
                       count=len(records))
    lons = np.fromiter((r.location.lon for r in records), dtype=np.float64,
                       count=len(records))
    return ids, lats, lons


# ---------------------------------------------------------------------------
# Observation stores
# ---------------------------------------------------------------------------

def save_observations_csv(records: list[ObservationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("species_id,lat,lon\n")
        for r in records:
            lat = np.float32(r.location.lat)
            lon = np.float32(r.location.lon)
            f.write(f"{r.species_id},{lat},{lon}\n")


def save_observations_binary(records: list[ObservationRecord], path) -> None:
    with open(path, "wb") as f:
        f.write(_OBS_MAGIC)
        f.write(struct.pack("<HQ", 1, len(records)))
        for r in records:
            f.write(struct.pack("<Iff", r.species_id, r.location.lat,
                                r.location.lon))


def _parse_observations_csv(path) -> list[ObservationRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "species_id,lat,lon":
            raise FormatError(f"{path}:1: bad header {header!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                sid = int(parts[0])
                lat = float(parts[1])
                lon = float(parts[2])
                if len(parts) != 3:
                    raise ValueError("wrong field count")
                records.append(ObservationRecord(sid, GeoPoint(lat, lon)))
            except (ValueError, IndexError, ConfigError) as e:
                raise FormatError(f"{path}:{lineno}: malformed row: {e}") from e
    return records


def _parse_observations_binary(path) -> list[ObservationRecord]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _OBS_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}", offset=0)
    version, count = struct.unpack_from("<HQ", buf, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    need = 14 + 12 * count
    if len(buf) < need:
        raise FormatError(f"{path}: truncated after "
                          f"{(len(buf) - 14) // 12} records", offset=len(buf))
    records = []
    off = 14
    for _ in range(count):
        sid, lat, lon = struct.unpack_from("<Iff", buf, off)
        records.append(ObservationRecord(sid, GeoPoint(float(lat), float(lon))))
        off += 12
    return records


def load_observations(path, cap: int = 1000, seed: int = 0,
                      held_out: list[int] | None = None
                      ) -> tuple[list[ObservationRecord], DatasetManifest]:
    """Load CSV or binary observations; cap each species at `cap` records by
    seeded uniform subsampling; drop held-out species from the split."""
    with open(path, "rb") as f:
        magic = f.read(4)
    records = (_parse_observations_binary(path) if magic == _OBS_MAGIC
               else _parse_observations_csv(path))
    held = set(held_out or [])

    by_species: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_species.setdefault(r.species_id, []).append(i)
    pre_counts = {sid: len(ix) for sid, ix in by_species.items()}

    for sid in held - set(by_species):
        warnings.warn(f"held-out species {sid} has no observations in {path}")

    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for sid in sorted(by_species):
        if sid in held:
            continue
        ix = by_species[sid]
        if len(ix) > cap:
            chosen = rng.choice(len(ix), size=cap, replace=False)
            ix = [ix[j] for j in np.sort(chosen)]
        keep.extend(ix)
    keep.sort()
    kept_records = [records[i] for i in keep]
    counts: dict[int, int] = {}
    for r in kept_records:
        counts[r.species_id] = counts.get(r.species_id, 0) + 1
    manifest = DatasetManifest(species_counts=counts, pre_counts=pre_counts,
                               held_out=sorted(held), cap=cap)
    return kept_records, manifest


# ---------------------------------------------------------------------------
# Embedding store
# ---------------------------------------------------------------------------

class EmbeddingStore:
    """Immutable set of text-embedding records with per-species indexes."""

    def __init__(self, dim: int, records: list[TextEmbeddingRecord]):
        self.dim = int(dim)
        self.records = list(records)
        seen = set()
        self._sections: dict[int, list[TextEmbeddingRecord]] = {}
        self._summaries: dict[tuple[int, TextKind], TextEmbeddingRecord] = {}
        for r in self.records:
            if r.vector.shape != (self.dim,):
                raise ConfigError(
                    f"embedding width {r.vector.shape} != store dim {self.dim}")
            key = (r.species_id, r.section_id)
            if key in seen:
                raise ConfigError(f"duplicate (species, section) {key}")
            seen.add(key)
            if r.kind == TextKind.SECTION:
                self._sections.setdefault(r.species_id, []).append(r)
            else:
                self._summaries[(r.species_id, r.kind)] = r

    def has_text(self, species_id: int) -> bool:
        return species_id in self._sections

    def sections(self, species_id: int) -> list[TextEmbeddingRecord]:
        return self._sections.get(species_id, [])

    def summary(self, species_id: int, kind: TextKind
                ) -> TextEmbeddingRecord | None:
        return self._summaries.get((species_id, kind))

    def sample_section(self, species_id: int, rng: np.random.Generator
                       ) -> TextEmbeddingRecord | None:
        """Uniform draw among the species' section records; None when the
        species has no text (callers then train the token branch only)."""
        recs = self._sections.get(species_id)
        if not recs:
            return None
        return recs[int(rng.integers(len(recs)))]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_EMB_MAGIC)
            f.write(struct.pack("<HIQ", 1, self.dim, len(self.records)))
            for r in self.records:
                f.write(struct.pack("<IIB", r.species_id, r.section_id,
                                    int(r.kind)))
                f.write(r.vector.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "EmbeddingStore":
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:4] != _EMB_MAGIC:
            raise FormatError(f"{path}: bad magic {buf[:4]!r}", offset=0)
        version, dim, count = struct.unpack_from("<HIQ", buf, 4)
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}", offset=4)
        off = 18
        rec_size = 9 + 4 * dim
        if len(buf) < off + rec_size * count:
            raise FormatError(f"{path}: truncated embedding store",
                              offset=len(buf))
        records = []
        for _ in range(count):
            sid, sec, kind = struct.unpack_from("<IIB", buf, off)
            off += 9
            vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=off).copy()
            off += 4 * dim
            records.append(TextEmbeddingRecord(sid, sec, TextKind(kind), vec))
        return EmbeddingStore(dim=dim, records=records)


def sample_section(store: EmbeddingStore, species_id: int,
                   rng: np.random.Generator) -> TextEmbeddingRecord | None:
    return store.sample_section(species_id, rng)


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Parameters of the generated benchmark world. The text embedding width
    is a free header field, kept small so tests run fast."""

    width: int = 96
    height: int = 48
    climate_fields: int = 6
    train_species: int = 60
    held_out_species: int = 12
    sharpness: float = 6.0
    text_noise: float = 0.5
    seed: int = 0
    text_dim: int = 64
    min_obs: int = 80
    max_obs: int = 300
    sections_per_species: int = 3

    def __post_init__(self):
        if min(self.width, self.height, self.climate_fields, self.train_species,
               self.held_out_species, self.text_dim, self.min_obs,
               self.sections_per_species) < 1:
            raise ConfigError("all synthetic world counts must be >= 1")
        if self.text_noise < 0:
            raise ConfigError("text noise must be >= 0")
        if self.max_obs < self.min_obs:
            raise ConfigError("max_obs < min_obs")


@dataclass
class SyntheticWorld:
    spec: SyntheticWorldSpec
    observations: list[ObservationRecord]      # all species, incl. held-out
    embeddings: EmbeddingStore
    truth: dict[int, RangeRaster]              # binary ground-truth ranges
    covariates: CovariateStack
    species_params: dict[int, np.ndarray]      # (K+1,) response vector per id
    train_ids: list[int]
    held_out_ids: list[int]
    field_query_embeddings: np.ndarray         # (K, text_dim)

    def fixture_texts(self) -> dict[str, list[float]]:
        """Canonical text -> embedding map for mock embedding services."""
        out: dict[str, list[float]] = {}
        for r in self.embeddings.records:
            if r.kind == TextKind.SECTION:
                continue
            name = ("range summary" if r.kind == TextKind.RANGE_SUMMARY
                    else "habitat summary")
            out[f"species {r.species_id} {name}"] = [float(v) for v in r.vector]
        for k in range(self.field_query_embeddings.shape[0]):
            out[f"climate field {k}"] = [float(v)
                                         for v in self.field_query_embeddings[k]]
        return out


def _make_climate_fields(spec: SyntheticWorldSpec, rng: np.random.Generator
                         ) -> np.ndarray:
    """K standardized smooth fields (K, H*W): sums of low-frequency sinusoids
    in scaled lon/lat, evaluated at cell centers."""
    lats, lons = grid_cell_centers(spec.width, spec.height, GLOBAL_BBOX)
    u = lons / 360.0
    v = lats / 180.0
    U, V = np.meshgrid(u, v)
    fields = np.empty((spec.climate_fields, spec.height * spec.width),
                      dtype=np.float32)
    for k in range(spec.climate_fields):
        grid = np.zeros_like(U)
        for _ in range(3):
            fu, fv = 0, 0
            while fu == 0 and fv == 0:
                fu = int(rng.integers(-2, 3))
                fv = int(rng.integers(-2, 3))
            amp = rng.uniform(0.5, 1.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            grid = grid + amp * np.sin(2 * np.pi * (fu * U + fv * V) + phase)
        flat = grid.reshape(-1)
        flat = (flat - flat.mean()) / flat.std()
        fields[k] = flat.astype(np.float32)
    return fields


def occupancy_from_params(fields: np.ndarray, a: np.ndarray) -> np.ndarray:
    """sigma(a[:K] . fields - a[K]) per cell; the generator and the
    regeneration oracle share this exact arithmetic."""
    z = a[:-1].astype(np.float64) @ fields.astype(np.float64) - float(a[-1])
    return 1.0 / (1.0 + np.exp(-z))


def generate_synthetic_world(spec: SyntheticWorldSpec,
                             seed: int | None = None) -> SyntheticWorld:
    """Pure function of (spec, seed): latent climate fields, species response
    vectors, presence observations sampled from occupancy, binary truth
    rasters, and text embeddings that encode each species' response vector
    (so text determines range up to noise)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    K = spec.climate_fields
    fields = _make_climate_fields(spec, rng)
    lats, lons = grid_cell_centers(spec.width, spec.height, GLOBAL_BBOX)
    cell_h = 180.0 / spec.height
    cell_w = 360.0 / spec.width
    cell_lats = np.repeat(lats, spec.width)
    cell_lons = np.tile(lons, spec.height)

    total = spec.train_species + spec.held_out_species
    species_params: dict[int, np.ndarray] = {}
    truth: dict[int, RangeRaster] = {}
    observations: list[ObservationRecord] = []

    for sid in range(total):
        while True:
            w = rng.normal(0.0, 1.0, size=K)
            score = w @ fields.astype(np.float64)
            sd = score.std()
            prevalence = rng.uniform(0.05, 0.25)
            b = float(np.quantile(score, 1.0 - prevalence))
            a = np.empty(K + 1)
            a[:K] = spec.sharpness * w / sd
            a[K] = spec.sharpness * b / sd
            occupancy = occupancy_from_params(fields, a)
            binary = occupancy > 0.5
            if binary.any() and not binary.all():
                break
            log.info("synthetic species %d had a degenerate range; resampled",
                     sid)
        species_params[sid] = a
        truth[sid] = RangeRaster(width=spec.width, height=spec.height,
                                 bbox=GLOBAL_BBOX,
                                 values=binary.astype(np.float32))
        n_obs = int(rng.integers(spec.min_obs, spec.max_obs + 1))
        p = occupancy / occupancy.sum()
        cells = rng.choice(occupancy.size, size=n_obs, replace=True, p=p)
        jlat = rng.uniform(-0.5, 0.5, size=n_obs) * cell_h
        jlon = rng.uniform(-0.5, 0.5, size=n_obs) * cell_w
        for c, dla, dlo in zip(cells, jlat, jlon):
            observations.append(ObservationRecord(
                sid, GeoPoint(float(cell_lats[c] + dla),
                              float(cell_lons[c] + dlo))))

    # Text embeddings: a fixed random projection of the response vector,
    # normalized so embeddings have unit-scale norms, with kind-specific
    # noise. Habitat summaries drop the prevalence component and carry more
    # noise than range summaries.
    G = rng.normal(0.0, 1.0, size=(spec.text_dim, K + 1)) / np.sqrt(K + 1)
    mean_norm = float(np.mean([np.linalg.norm(G @ species_params[s])
                               for s in range(total)]))
    G /= mean_norm
    records: list[TextEmbeddingRecord] = []
    for sid in range(total):
        a = species_params[sid]
        base = G @ a
        sig = np.linalg.norm(base) / np.sqrt(spec.text_dim)
        a_hab = a.copy()
        a_hab[K] = 0.0
        hab_base = G @ a_hab
        for j in range(spec.sections_per_species):
            vec = base + rng.normal(0.0, spec.text_noise * sig, spec.text_dim)
            records.append(TextEmbeddingRecord(
                sid, j, TextKind.SECTION, vec.astype(np.float32)))
        vec = base + rng.normal(0.0, 0.3 * spec.text_noise * sig, spec.text_dim)
        records.append(TextEmbeddingRecord(
            sid, 1000, TextKind.RANGE_SUMMARY, vec.astype(np.float32)))
        vec = hab_base + rng.normal(0.0, 1.5 * spec.text_noise * sig,
                                    spec.text_dim)
        records.append(TextEmbeddingRecord(
            sid, 1001, TextKind.HABITAT_SUMMARY, vec.astype(np.float32)))

    # Per-field concept queries: unit-norm directions in embedding space.
    queries = np.empty((K, spec.text_dim), dtype=np.float32)
    for k in range(K):
        col = G[:, k]
        queries[k] = (col / np.linalg.norm(col)).astype(np.float32)

    stack = CovariateStack(names=[f"field{k}" for k in range(K)],
                           layers=fields, bbox=GLOBAL_BBOX,
                           width=spec.width, height=spec.height)
    return SyntheticWorld(
        spec=spec, observations=observations,
        embeddings=EmbeddingStore(dim=spec.text_dim, records=records),
        truth=truth, covariates=stack, species_params=species_params,
        train_ids=list(range(spec.train_species)),
        held_out_ids=list(range(spec.train_species, total)),
        field_query_embeddings=queries)


def save_world(world: SyntheticWorld, out_dir) -> None:
    """Write a generated world as its on-disk dataset bundle."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "truth"), exist_ok=True)
    save_observations_csv(world.observations,
                          os.path.join(out_dir, "observations.csv"))
    world.embeddings.save(os.path.join(out_dir, "embeddings.lese"))
    world.covariates.save(os.path.join(out_dir, "covariates.lesc"))
    for sid, raster in sorted(world.truth.items()):
        raster.save(os.path.join(out_dir, "truth", f"{sid}.lesr"))
    manifest = {
        "spec": {
            "width": world.spec.width, "height": world.spec.height,
            "climate_fields": world.spec.climate_fields,
            "train_species": world.spec.train_species,
            "held_out_species": world.spec.held_out_species,
            "sharpness": world.spec.sharpness,
            "text_noise": world.spec.text_noise,
            "seed": world.spec.seed, "text_dim": world.spec.text_dim,
            "min_obs": world.spec.min_obs, "max_obs": world.spec.max_obs,
            "sections_per_species": world.spec.sections_per_species,
        },
        "train_ids": world.train_ids,
        "held_out_ids": world.held_out_ids,
        "species_params": {str(sid): [float(v) for v in a]
                           for sid, a in sorted(world.species_params.items())},
        "field_queries": [[float(v) for v in row]
                          for row in world.field_query_embeddings],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "fixtures.json"), "w", encoding="utf-8") as f:
        json.dump(world.fixture_texts(), f, sort_keys=True)
        f.write("\n")


def load_world(out_dir) -> SyntheticWorld:
    """Reload a saved world bundle (embeddings/rasters from their files)."""
    with open(os.path.join(out_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    spec = SyntheticWorldSpec(**manifest["spec"])
    observations = _parse_observations_csv(
        os.path.join(out_dir, "observations.csv"))
    embeddings = EmbeddingStore.load(os.path.join(out_dir, "embeddings.lese"))
    covariates = CovariateStack.load(os.path.join(out_dir, "covariates.lesc"))
    species_params = {int(sid): np.array(a, dtype=np.float64)
                      for sid, a in manifest["species_params"].items()}
    truth = {sid: RangeRaster.load(os.path.join(out_dir, "truth", f"{sid}.lesr"))
             for sid in species_params}
    return SyntheticWorld(
        spec=spec, observations=observations, embeddings=embeddings,
        truth=truth, covariates=covariates, species_params=species_params,
        train_ids=list(manifest["train_ids"]),
        held_out_ids=list(manifest["held_out_ids"]),
        field_query_embeddings=np.array(manifest["field_queries"],
                                        dtype=np.float32))


# ---------------------------------------------------------------------------
# Embedding-service client
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingClientConfig:
    url: str
    dim: int = 4096
    auth_token_env: str | None = None
    timeout: float = 10.0
    retries: int = 3
    backoff: float = 0.25
    cache_dir: str | None = None


class EmbeddingClient:
    """Thin client for an external text-embedding service.

    Wire contract: HTTP POST {"text": ...} -> {"vector": [...]}. Responses
    are validated for width and finiteness, and cached on disk by content
    hash so repeated texts never touch the network."""

    def __init__(self, config: EmbeddingClientConfig):
        self.config = config
        self._lock = threading.Lock()
        if config.cache_dir:
            os.makedirs(config.cache_dir, exist_ok=True)

    def _cache_path(self, text: str) -> str | None:
        if not self.config.cache_dir:
            return None
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return os.path.join(self.config.cache_dir, f"{digest}.npy")

    def fetch(self, text: str) -> np.ndarray:
        cache = self._cache_path(text)
        if cache and os.path.exists(cache):
            return np.load(cache)
        vec = self._fetch_remote(text)
        if cache:
            with self._lock:
                tmp = cache + ".tmp"
                with open(tmp, "wb") as f:
                    np.save(f, vec)
                os.replace(tmp, cache)
        return vec

    def _fetch_remote(self, text: str) -> np.ndarray:
        import requests

        headers = {}
        if self.config.auth_token_env:
            token = os.environ.get(self.config.auth_token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        last_err: Exception | None = None
        for attempt in range(self.config.retries):
            try:
                resp = requests.post(self.config.url, json={"text": text},
                                     headers=headers,
                                     timeout=self.config.timeout)
                resp.raise_for_status()
                body = resp.json()
                vec = np.asarray(body["vector"], dtype=np.float32)
                if vec.shape != (self.config.dim,):
                    raise FormatError(
                        f"embedding service returned width {vec.shape}, "
                        f"expected ({self.config.dim},)")
                if not np.all(np.isfinite(vec)):
                    raise FormatError("embedding service returned non-finite "
                                      "values")
                return vec
            except FormatError:
                raise
            except Exception as e:  # network / HTTP / JSON errors
                last_err = e
                if attempt + 1 < self.config.retries:
                    time.sleep(self.config.backoff * (2 ** attempt))
        raise ConnectionError(
            f"embedding service at {self.config.url} failed after "
            f"{self.config.retries} attempts: {last_err}")


def fetch_text_embedding(text: str, config: EmbeddingClientConfig) -> np.ndarray:
    return EmbeddingClient(config).fetch(text)
