"""HTTP service: zero-shot, few-shot, and grounding rasters over a loaded
checkpoint, plus a proxied/cached text-embedding endpoint.

Rasters are returned by content-hash id and fetched separately as PNG or in
the binary raster layout; any raster id is exactly reproducible by replaying
its recorded request against the same checkpoint hash. The model snapshot is
read-only; concurrent requests share it freely.

A deterministic mock embedding service (exact-text fixtures plus hash-seeded
vectors) ships alongside for demos and end-to-end tests.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .data import EmbeddingClient, EmbeddingClientConfig, load_observations
from .errors import FormatError
from .evals import ground_text_raster, raster_to_png, zero_shot_raster
from .fewshot import (FewShotConfig, fit_range_vector, grid_features,
                      predict_fewshot_raster, sample_fewshot_negatives)
from .geo import (CovariateStack, GeoPoint, GLOBAL_BBOX, RangeRaster,
                  raster_to_bytes)
from .model import ModelParams, load_checkpoint, text_species_vector_np


@dataclass
class ServiceConfig:
    checkpoint: str | None = None
    host: str = "127.0.0.1"
    port: int = 8900
    grid_width: int = 96
    grid_height: int = 48
    embed_url: str | None = None
    embed_dim: int | None = None       # defaults to the model's text width
    embed_token_env: str | None = None
    embed_cache_dir: str | None = None
    observations: str | None = None    # training locations for negatives
    covariates: str | None = None
    use_covariates: bool = False
    static_dir: str | None = None      # optional web client to serve at /


@dataclass
class ServiceState:
    config: ServiceConfig
    params: ModelParams | None = None
    checkpoint_hash: str = ""
    embed_client: EmbeddingClient | None = None
    cov: CovariateStack | None = None
    train_obs: list = field(default_factory=list)
    rasters: dict[str, tuple[RangeRaster, dict]] = field(default_factory=dict)
    grid_feats: np.ndarray | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def build_state(config: ServiceConfig) -> ServiceState:
    state = ServiceState(config=config)
    if config.checkpoint:
        with open(config.checkpoint, "rb") as f:
            blob = f.read()
        state.checkpoint_hash = hashlib.sha256(blob).hexdigest()[:16]
        state.params = load_checkpoint(config.checkpoint)
    if config.covariates and config.use_covariates:
        state.cov = CovariateStack.load(config.covariates)
    if config.observations:
        state.train_obs, _ = load_observations(config.observations,
                                               cap=10**9, seed=0)
    if config.embed_url:
        dim = config.embed_dim
        if dim is None and state.params is not None:
            dim = state.params.config.text_in
        state.embed_client = EmbeddingClient(EmbeddingClientConfig(
            url=config.embed_url, dim=dim or 4096,
            auth_token_env=config.embed_token_env,
            cache_dir=config.embed_cache_dir))
    if state.params is not None:
        state.grid_feats = grid_features(state.params, config.grid_width,
                                         config.grid_height, GLOBAL_BBOX,
                                         state.cov)
    return state


def _err(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _raster_id(state: ServiceState, kind: str, payload: dict) -> str:
    canonical = json.dumps({"kind": kind, "payload": payload,
                            "checkpoint": state.checkpoint_hash,
                            "grid": [state.config.grid_width,
                                     state.config.grid_height]},
                           sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:24]


def _vector_payload(vec: np.ndarray) -> dict:
    digest = hashlib.sha256(vec.astype("<f4").tobytes()).hexdigest()
    return {"vector_sha256": digest}


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="georange", docs_url=None, redoc_url=None)

    async def read_json(request: Request) -> dict | None:
        try:
            body = await request.json()
        except Exception:
            return None
        return body if isinstance(body, dict) else None

    def resolve_vector(body: dict):
        """Returns (vector, error_response). Accepts an inline vector or a
        text field resolved through the embedding service."""
        params = state.params
        if "vector" in body:
            try:
                vec = np.asarray(body["vector"], dtype=np.float32).reshape(-1)
            except (TypeError, ValueError):
                return None, _err(400, "vector must be a flat number array")
            if vec.shape[0] != params.config.text_in:
                return None, _err(422, f"vector width {vec.shape[0]} != "
                                       f"model width {params.config.text_in}")
            if not np.all(np.isfinite(vec)):
                return None, _err(422, "vector has non-finite entries")
            return vec, None
        if "text" in body:
            if not isinstance(body["text"], str) or not body["text"].strip():
                return None, _err(400, "text must be a non-empty string")
            if state.embed_client is None:
                return None, _err(502, "no embedding service configured")
            try:
                vec = state.embed_client.fetch(body["text"])
            except (ConnectionError, FormatError) as e:
                return None, _err(502, f"embedding service failed: {e}")
            if vec.shape[0] != params.config.text_in:
                return None, _err(422, f"embedding width {vec.shape[0]} != "
                                       f"model width {params.config.text_in}")
            return vec, None
        return None, _err(400, "need 'vector' or 'text'")

    def store_raster(rid: str, raster: RangeRaster, request: dict) -> None:
        with state.lock:
            state.rasters[rid] = (raster, request)

    @app.post("/api/embed")
    async def embed(request: Request):
        body = await read_json(request)
        if body is None or not isinstance(body.get("text"), str):
            return _err(400, "body must be JSON with a 'text' string")
        if state.embed_client is None:
            return _err(502, "no embedding service configured")
        try:
            vec = state.embed_client.fetch(body["text"])
        except (ConnectionError, FormatError) as e:
            return _err(502, f"embedding service failed: {e}")
        return {"vector": [float(v) for v in vec]}

    @app.post("/api/predict/zeroshot")
    async def predict_zeroshot(request: Request):
        if state.params is None:
            return _err(503, "no model loaded")
        body = await read_json(request)
        if body is None:
            return _err(400, "malformed JSON body")
        vec, err = resolve_vector(body)
        if err is not None:
            return err
        payload = _vector_payload(vec)
        rid = _raster_id(state, "zeroshot", payload)
        if rid not in state.rasters:
            raster = zero_shot_raster(state.params, vec,
                                      state.config.grid_width,
                                      state.config.grid_height,
                                      cov=state.cov,
                                      features=state.grid_feats)
            store_raster(rid, raster, {"kind": "zeroshot", **payload})
        raster = state.rasters[rid][0]
        vals = raster.values[raster.valid_mask]
        return {"raster_id": rid,
                "stats": {"min": float(vals.min()), "max": float(vals.max()),
                          "mean": float(vals.mean())}}

    @app.post("/api/predict/fewshot")
    async def predict_fewshot(request: Request):
        if state.params is None:
            return _err(503, "no model loaded")
        body = await read_json(request)
        if body is None:
            return _err(400, "malformed JSON body")
        obs = body.get("observations")
        if not isinstance(obs, list) or len(obs) == 0:
            return _err(400, "need at least one positive observation "
                             "(n_p >= 1)")
        points = []
        for item in obs:
            try:
                points.append(GeoPoint(float(item["lat"]),
                                       float(item["lon"])))
            except (KeyError, TypeError, ValueError) as e:
                return _err(400, f"bad observation entry: {e}")
        prior = None
        payload: dict = {"observations": [[p.lat, p.lon] for p in points]}
        if "vector" in body or "text" in body:
            vec, err = resolve_vector(body)
            if err is not None:
                return err
            prior = text_species_vector_np(state.params,
                                           vec).astype(np.float64)
            payload.update(_vector_payload(vec))
        lam = float(body.get("lambda", 20.0))
        n_neg = int(body.get("n_neg", 20000))
        seed = int(body.get("seed", 0))
        if lam < 0 or n_neg < 2:
            return _err(400, "lambda must be >= 0 and n_neg >= 2")
        payload.update({"lambda": lam, "n_neg": n_neg, "seed": seed})
        rid = _raster_id(state, "fewshot", payload)
        if rid in state.rasters:
            fit_info = state.rasters[rid][1].get("fit", {})
            return {"raster_id": rid, "fit": fit_info}
        rng = np.random.default_rng(seed)
        negatives = sample_fewshot_negatives(state.train_obs, n_neg, rng)
        fit = fit_range_vector(state.params, points, negatives,
                               FewShotConfig(lam=lam, n_neg=n_neg,
                                             prior=prior, seed=seed),
                               state.grid_feats, state.cov)
        raster = predict_fewshot_raster(
            state.params, fit, state.config.grid_width,
            state.config.grid_height, cov=state.cov,
            features=state.grid_feats)
        fit_info = {"converged": fit.converged, "iterations": fit.iterations}
        store_raster(rid, raster, {"kind": "fewshot", **payload,
                                   "fit": fit_info})
        return {"raster_id": rid, "fit": fit_info}

    @app.get("/api/ground")
    async def ground(text: str = ""):
        if state.params is None:
            return _err(503, "no model loaded")
        if not text.strip():
            return _err(400, "need a non-empty text query")
        if state.embed_client is None:
            return _err(502, "no embedding service configured")
        try:
            vec = state.embed_client.fetch(text)
        except (ConnectionError, FormatError) as e:
            return _err(502, f"embedding service failed: {e}")
        if vec.shape[0] != state.params.config.text_in:
            return _err(422, f"embedding width {vec.shape[0]} != model "
                             f"width {state.params.config.text_in}")
        payload = _vector_payload(vec)
        rid = _raster_id(state, "ground", payload)
        if rid not in state.rasters:
            raster = ground_text_raster(state.params, vec,
                                        state.config.grid_width,
                                        state.config.grid_height,
                                        cov=state.cov,
                                        features=state.grid_feats)
            store_raster(rid, raster, {"kind": "ground", **payload})
        return {"raster_id": rid}

    @app.get("/api/raster/{rid}.png")
    async def raster_png(rid: str):
        entry = state.rasters.get(rid)
        if entry is None:
            return _err(404, f"unknown raster {rid}")
        buf = io.BytesIO()
        raster_to_png(entry[0], buf)
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/raster/{rid}.bin")
    async def raster_bin(rid: str):
        entry = state.rasters.get(rid)
        if entry is None:
            return _err(404, f"unknown raster {rid}")
        return Response(content=raster_to_bytes(entry[0]),
                        media_type="application/octet-stream")

    @app.get("/api/model/info")
    async def model_info():
        if state.params is None:
            return _err(503, "no model loaded")
        cfg = state.params.config
        return {
            "feature_dim": cfg.feature_dim,
            "text_in": cfg.text_in,
            "env_channels": cfg.env_channels,
            "species_count": len(state.params.species_ids),
            "config_hash": state.checkpoint_hash,
            "grid": {"width": state.config.grid_width,
                     "height": state.config.grid_height},
        }

    if state.config.static_dir:
        app.mount("/", StaticFiles(directory=state.config.static_dir,
                                   html=True), name="static")

    return app


def create_mock_embedder_app(dim: int = 64,
                             fixtures: dict[str, list[float]] | None = None
                             ) -> FastAPI:
    """Embedding-service stand-in: exact fixture texts return their stored
    vectors; any other text maps to a deterministic hash-seeded vector."""
    app = FastAPI(title="georange-mock-embedder", docs_url=None,
                  redoc_url=None)
    table = dict(fixtures or {})

    @app.post("/")
    async def embed(request: Request):
        try:
            body = await request.json()
            text = body["text"]
            assert isinstance(text, str)
        except Exception:
            return _err(400, "body must be JSON with a 'text' string")
        if text in table:
            vec = np.asarray(table[text], dtype=np.float32)
        else:
            seed = int.from_bytes(
                hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
            vec = np.random.default_rng(seed).normal(
                0.0, 1.0, size=dim).astype(np.float32)
            vec /= max(float(np.linalg.norm(vec)), 1e-9)
        return {"vector": [float(v) for v in vec]}

    return app
