"""Presence-only training: the subsampled assume-negative loss with
inverse-proportion negative weighting, negative slate sampling, and the
dual-branch (token + text) training loop.

Per observation the loss scores the true species and M-1 random other
species at the observation location, plus M random species at one random
location, weighting subsampled negatives by (S-1)/(M-1) and S/M so the
expectation over slates equals the full all-species loss:

    -(1/S) * sum_j [ 1[z_j=1] * lam * log(p_j)
                     + 1[z_j!=1] * (S-1)/(M-1) * log(1 - p_j)
                     + (S/M) * log(1 - p'_j) ]

The same slates feed two independent predictions: one from the species token
table and one from the text head over a per-iteration sampled text section.
Both losses are summed with equal weight; observations of species with no
text contribute no text-branch terms at all.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .data import DatasetManifest, EmbeddingStore, ObservationRecord
from .errors import ConfigError, NumericError
from .geo import CovariateStack, GeoPoint, encode_positions, sample_uniform_location
from .model import (ModelConfig, ModelParams, init_model, location_features,
                    save_checkpoint, text_species_embedding)
from .numkit import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7  # probabilities are clamped to [eps, 1-eps] before logs


@dataclass(frozen=True)
class LossWeights:
    """Positive weight, slate size, and species count for one loss evaluation."""

    lam_pos: float
    m: int
    s: int

    def __post_init__(self):
        if not (2 <= self.m <= self.s):
            raise ConfigError(f"need 2 <= M <= S, got M={self.m}, S={self.s}")
        if self.lam_pos <= 0:
            raise ConfigError("positive weight must be > 0")


@dataclass
class LossBatch:
    """Predictions for one observation: M probabilities at the observation
    location (slot of the true species marked by the one-hot z) and M at a
    paired random location."""

    yhat: Tensor
    z: np.ndarray
    yhat_prime: Tensor

    def __post_init__(self):
        if not isinstance(self.yhat, Tensor):
            self.yhat = Tensor(np.asarray(self.yhat, dtype=np.float64))
        if not isinstance(self.yhat_prime, Tensor):
            self.yhat_prime = Tensor(np.asarray(self.yhat_prime,
                                                dtype=np.float64))
        self.z = np.asarray(self.z)
        m = self.yhat.data.shape[0]
        if self.z.shape != (m,) or self.yhat_prime.data.shape != (m,):
            raise ConfigError("LossBatch fields must share length M")
        if int((self.z == 1).sum()) != 1:
            raise ConfigError("z must be one-hot")
        for arr in (self.yhat.data, self.yhat_prime.data):
            if np.any(arr <= 0) or np.any(arr >= 1):
                raise ConfigError("probabilities must lie in (0, 1)")


def sampled_anfull_loss(batch: LossBatch, weights: LossWeights) -> Tensor:
    """Scalar loss Tensor; differentiable when the batch holds taped tensors."""
    m, s = weights.m, weights.s
    if batch.yhat.data.shape[0] != m:
        raise ConfigError(f"batch length {batch.yhat.data.shape[0]} != M={m}")
    dt = batch.yhat.data.dtype
    z = batch.z.astype(dt)
    w_pos = Tensor(weights.lam_pos * z, dtype=dt)
    w_neg = Tensor(((s - 1) / (m - 1)) * (1 - z), dtype=dt)
    ones = Tensor(np.ones(m, dtype=dt), dtype=dt)

    p = nk.clamp(batch.yhat, PROB_EPS, 1 - PROB_EPS)
    pos_terms = nk.mul(nk.log(p), w_pos)
    neg_terms = nk.mul(nk.log(nk.add(nk.scale(p, -1.0), ones)), w_neg)
    p2 = nk.clamp(batch.yhat_prime, PROB_EPS, 1 - PROB_EPS)
    rand_sum = nk.scale(nk.reduce_sum(nk.log(nk.add(nk.scale(p2, -1.0), ones))),
                        s / m)
    obs_sum = nk.reduce_sum(nk.add(pos_terms, neg_terms))
    return nk.scale(nk.add(obs_sum, rand_sum), -1.0 / s)


def sample_negatives(obs: ObservationRecord, manifest: DatasetManifest,
                     m: int, rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray, GeoPoint]:
    """Slates for one observation: M-1 species at the observation location
    (true species excluded), M species at a fresh sphere-uniform location.
    Draws are uniform without replacement over the training species."""
    ids = np.asarray(manifest.species_ids)
    s = len(ids)
    if s < m:
        raise ConfigError(f"slate size M={m} exceeds species count S={s}")
    pool = ids[ids != obs.species_id]
    obs_negs = rng.choice(pool, size=m - 1, replace=False)
    rand_ids = rng.choice(ids, size=m, replace=False)
    return obs_negs, rand_ids, sample_uniform_location(rng)


def _sample_slate_rows(true_rows: np.ndarray, s: int, m: int,
                       rng: np.random.Generator
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Batched slates as token rows: ((B, M-1) obs negatives excluding the
    true row, (B, M) random-location slate). Uniform subsets via the
    smallest-random-keys trick."""
    b = true_rows.shape[0]
    keys = rng.random((b, s))
    keys[np.arange(b), true_rows] = np.inf
    obs_neg = np.argpartition(keys, m - 2, axis=1)[:, :m - 1]
    if m == s:
        rand_rows = np.broadcast_to(np.arange(s), (b, s)).copy()
    else:
        keys2 = rng.random((b, s))
        rand_rows = np.argpartition(keys2, m - 1, axis=1)[:, :m]
    return obs_neg, rand_rows


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.0005
    batch_size: int = 2048
    m: int = 192
    lam_pos: float = 2048.0
    seed: int = 0
    env: bool = False
    precision: str = "float32"

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.m) < 0 or self.m < 2:
            raise ConfigError("epochs/batch_size must be positive, M >= 2")
        if self.learning_rate <= 0 or self.lam_pos <= 0:
            raise ConfigError("learning rate and positive weight must be > 0")


@dataclass
class TrainData:
    observations: list[ObservationRecord]
    manifest: DatasetManifest
    embeddings: EmbeddingStore | None = None
    covariates: CovariateStack | None = None


@dataclass
class _Prepared:
    """Arrays derived once from TrainData for the step loop."""

    true_rows: np.ndarray
    positions: np.ndarray            # (N, 4+C) encoded observation inputs
    has_text: np.ndarray             # (S,) bool per token row
    row_ids: np.ndarray              # (S,) species id per row
    cov: CovariateStack | None


def _prepare(data: TrainData, params: ModelParams, env: bool) -> _Prepared:
    ids = np.fromiter((r.species_id for r in data.observations), dtype=np.int64,
                      count=len(data.observations))
    lats = np.fromiter((r.location.lat for r in data.observations),
                       dtype=np.float64, count=len(ids))
    lons = np.fromiter((r.location.lon for r in data.observations),
                       dtype=np.float64, count=len(ids))
    row_ids = np.asarray(params.species_ids)
    rows = np.searchsorted(row_ids, ids)
    if np.any(row_ids[np.clip(rows, 0, len(row_ids) - 1)] != ids):
        raise ConfigError("observation species missing from the model's table")
    cov = data.covariates if env else None
    positions = encode_positions(lats, lons, cov).astype(params.config.dtype)
    has_text = np.zeros(len(row_ids), dtype=bool)
    if data.embeddings is not None:
        for i, sid in enumerate(row_ids):
            has_text[i] = data.embeddings.has_text(int(sid))
    return _Prepared(true_rows=rows, positions=positions, has_text=has_text,
                     row_ids=row_ids, cov=cov)


def _sample_random_positions(b: int, cov: CovariateStack | None, dtype,
                             rng: np.random.Generator) -> np.ndarray:
    lons = rng.uniform(-180.0, 180.0, size=b)
    lats = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, size=b)))
    return encode_positions(lats, lons, cov).astype(dtype)


def _text_matrix(store: EmbeddingStore, row_ids: np.ndarray,
                 rows_with_text: np.ndarray, rng: np.random.Generator,
                 dtype) -> np.ndarray:
    """One sampled section vector per listed row (per-iteration sampling)."""
    vecs = [store.sample_section(int(row_ids[r]), rng).vector
            for r in rows_with_text]
    return np.stack(vecs).astype(dtype)


def train_step(params: ModelParams, batch_idx: np.ndarray, prep: _Prepared,
               data: TrainData, config: TrainConfig,
               opt: nk.AdamState, rng: np.random.Generator) -> dict:
    """One optimizer step over a batch of observations; returns loss parts."""
    s = params.tokens.data.shape[0]
    m = config.m
    b = len(batch_idx)
    dt = params.config.dtype

    rows = prep.true_rows[batch_idx]
    obs_neg, rand_rows = _sample_slate_rows(rows, s, m, rng)
    x_obs = prep.positions[batch_idx]
    x_rand = _sample_random_positions(b, prep.cov, dt, rng)

    flat_obs = np.concatenate([rows[:, None], obs_neg], axis=1).reshape(-1)
    flat_rand = rand_rows.reshape(-1)

    w_pos = np.zeros(b * m, dtype=dt)
    w_pos[0::m] = config.lam_pos
    w_neg = np.full(b * m, (s - 1) / (m - 1), dtype=dt)
    w_neg[0::m] = 0.0
    w_rand = np.full(b * m, s / m, dtype=dt)
    norm = 1.0 / (s * b)

    use_text = data.embeddings is not None and prep.has_text.any()
    if use_text:
        needed = np.unique(np.concatenate([rows, flat_obs, flat_rand]))
        rows_with_text = needed[prep.has_text[needed]]
        use_text = rows_with_text.size > 0
    if use_text:
        text_mat = _text_matrix(data.embeddings, prep.row_ids, rows_with_text,
                                rng, dt)
        lut = np.zeros(s, dtype=np.int64)
        lut[rows_with_text] = np.arange(rows_with_text.size)
        obs_text_ok = prep.has_text[flat_obs] & np.repeat(
            prep.has_text[rows], m)
        rand_text_ok = prep.has_text[flat_rand] & np.repeat(
            prep.has_text[rows], m)

    def branch_loss(rec_obs_feat, rec_rand_feat, table, idx_obs, idx_rand,
                    wp, wn, wr):
        # -log p and -log(1-p) built from logits via softplus: identical to
        # the clamped-probability loss away from saturation, but saturated
        # slots keep their corrective gradient.
        z_o = nk.dot(nk.repeat_rows(rec_obs_feat, m),
                     nk.gather_rows(table, idx_obs))
        terms_o = nk.add(
            nk.mul(nk.softplus(nk.scale(z_o, -1.0)), Tensor(wp, dtype=dt)),
            nk.mul(nk.softplus(z_o), Tensor(wn, dtype=dt)))
        z_r = nk.dot(nk.repeat_rows(rec_rand_feat, m),
                     nk.gather_rows(table, idx_rand))
        terms_r = nk.mul(nk.softplus(z_r), Tensor(wr, dtype=dt))
        return nk.scale(nk.add(nk.reduce_sum(terms_o), nk.reduce_sum(terms_r)),
                        norm)

    with nk.recording() as rec:
        loc_obs = location_features(params, x_obs)
        loc_rand = location_features(params, x_rand)
        token_loss = branch_loss(loc_obs, loc_rand, params.tokens,
                                 flat_obs, flat_rand, w_pos, w_neg, w_rand)
        if use_text:
            text_feats = text_species_embedding(params, Tensor(text_mat, dtype=dt))
            text_loss = branch_loss(loc_obs, loc_rand, text_feats,
                                    lut[flat_obs], lut[flat_rand],
                                    w_pos * obs_text_ok, w_neg * obs_text_ok,
                                    w_rand * rand_text_ok)
        else:
            text_loss = Tensor(np.zeros((), dtype=dt), dtype=dt)
        total = nk.add(token_loss, text_loss)

    if not np.isfinite(total.data):
        raise NumericError(
            f"non-finite loss on batch starting at observation {batch_idx[0]}")
    grads = nk.backward(rec, total, opt.params)
    nk.adam_step(opt.params, grads, opt)
    return {"token_loss": float(token_loss.data),
            "text_loss": float(text_loss.data)}


def train(data: TrainData, config: TrainConfig,
          model_config: ModelConfig | None = None,
          checkpoint_path=None, report_path=None
          ) -> tuple[ModelParams, list[dict]]:
    """Full training run: seed-deterministic epochs of shuffled batches.

    A checkpoint is written after every epoch (atomically) so interruption
    leaves the last good one; the report has one record per epoch."""
    s = data.manifest.num_species
    if config.m > s:
        raise ConfigError(f"M={config.m} exceeds species count S={s}")
    if config.env and data.covariates is None:
        raise ConfigError("env=True but no covariate stack provided")
    if model_config is None:
        model_config = ModelConfig(
            env_channels=data.covariates.channels if config.env else 0,
            text_in=data.embeddings.dim if data.embeddings is not None else 4096,
            seed=config.seed, precision=config.precision)
    params = init_model(model_config, data.manifest.species_ids)
    prep = _prepare(data, params, config.env)
    opt = nk.AdamState(params=params.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    n = len(data.observations)
    report: list[dict] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        tok_sum = txt_sum = 0.0
        seen = 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            try:
                parts = train_step(params, batch, prep, data, config, opt, rng)
            except NumericError as e:
                log.error("step aborted in epoch %d: %s", epoch, e)
                raise
            tok_sum += parts["token_loss"] * len(batch)
            txt_sum += parts["text_loss"] * len(batch)
            seen += len(batch)
        wall = time.perf_counter() - t0
        rec = {"epoch": epoch, "token_loss": tok_sum / max(seen, 1),
               "text_loss": txt_sum / max(seen, 1), "wall_seconds": wall,
               "obs_per_second": seen / wall if wall > 0 else 0.0}
        report.append(rec)
        log.info("epoch %d: token %.4f text %.4f (%.0f obs/s)", epoch,
                 rec["token_loss"], rec["text_loss"], rec["obs_per_second"])
        if checkpoint_path is not None:
            tmp = str(checkpoint_path) + ".tmp"
            save_checkpoint(params, tmp)
            os.replace(tmp, checkpoint_path)

    if checkpoint_path is not None and config.epochs == 0:
        save_checkpoint(params, checkpoint_path)
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as f:
            for rec in report:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return params, report
