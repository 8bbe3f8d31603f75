"""Metrics and benchmark harness: average precision with block-averaged tie
handling, constant and model-mean baselines, zero-shot rasters from text
embeddings, few-shot curves, concept-grounding rasters, and raster PNG
export.

Tie rule: positives inside a tied-score block receive the average precision
over the block's positions assuming positives spread evenly through the
block, so a constant score field scores exactly its positive prevalence and
AP is invariant to any strictly increasing transform of the scores.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import ObservationRecord
from .errors import ConfigError
from .fewshot import (FewShotConfig, fit_range_vector, grid_features,
                      sample_fewshot_negatives)
from .geo import BBox, CovariateStack, GLOBAL_BBOX, RangeRaster
from .model import ModelParams, text_species_vector_np

_SIGMOID_CLIP = 500.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_SIGMOID_CLIP, _SIGMOID_CLIP)))


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def average_precision(scores: np.ndarray, labels: np.ndarray,
                      mask: np.ndarray | None = None,
                      cell_weights: np.ndarray | None = None) -> float:
    """AP of scores against binary labels over masked-in cells.

    Unweighted mode uses the exact block-average tie rule. cell_weights
    (e.g. latitude area weights) switches to a continuous within-block
    model; it agrees with the unweighted rule in the limit of small blocks
    but is not bit-identical under uniform weights.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ConfigError(f"scores {s.shape} vs labels {y.shape}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        s, y = s[keep], y[keep]
        if cell_weights is not None:
            cell_weights = np.asarray(cell_weights,
                                      dtype=np.float64).reshape(-1)[keep]
    n = s.size
    p_total = int(y.sum())
    if p_total == 0:
        raise ValueError("AP undefined: no positive cells")
    if p_total == n:
        raise ValueError("AP undefined: no negative cells")
    if not np.all(np.isfinite(s)):
        raise ConfigError("non-finite scores")

    if cell_weights is not None:
        return _weighted_ap(s, y, cell_weights)

    order = np.argsort(-s, kind="stable")
    ss = s[order]
    yy = y[order]
    change = np.nonzero(np.diff(ss))[0]
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change, [n - 1]])
    if starts.size == 1:
        return p_total / n  # all scores tied: AP is the prevalence, exactly

    cum_pos = np.cumsum(yy)
    harm = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, n + 1))])
    total = 0.0
    for st, en in zip(starts, ends):
        p_prev = cum_pos[st - 1] if st > 0 else 0
        p_blk = cum_pos[en] - p_prev
        if p_blk == 0:
            continue
        b = en - st + 1
        delta_h = harm[st + b] - harm[st]
        prec = (delta_h * (p_prev - (p_blk / b) * st) + p_blk) / b
        total += p_blk * prec
    return float(total / p_total)


def _weighted_ap(s: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    order = np.argsort(-s, kind="stable")
    ss, yy, ww = s[order], y[order], w[order]
    change = np.nonzero(np.diff(ss))[0]
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change, [ss.size - 1]])
    cum_w = np.cumsum(ww)
    cum_wp = np.cumsum(ww * yy)
    wp_total = cum_wp[-1]
    if wp_total <= 0:
        raise ValueError("AP undefined: zero positive weight")
    total = 0.0
    for st, en in zip(starts, ends):
        wn_prev = cum_w[st - 1] if st > 0 else 0.0
        wp_prev = cum_wp[st - 1] if st > 0 else 0.0
        wb = cum_w[en] - wn_prev
        wp = cum_wp[en] - wp_prev
        if wp <= 0 or wb <= 0:
            continue
        if wn_prev == 0.0:
            prec = wp / wb
        else:
            ratio = np.log1p(wb / wn_prev)
            prec = wp / wb + (wp_prev * wb - wn_prev * wp) / (wb * wb) * ratio
        total += wp * prec
    return float(total / wp_total)


# ---------------------------------------------------------------------------
# Score fields
# ---------------------------------------------------------------------------

def inner_product_field(params: ModelParams, embedding: np.ndarray,
                        features: np.ndarray) -> np.ndarray:
    """Raw per-cell f(x) . g(e) at raster (f32) precision."""
    v = text_species_vector_np(params, embedding).astype(np.float64)
    return (features @ v).astype(np.float32)


def zero_shot_scores(params: ModelParams, embedding: np.ndarray,
                     features: np.ndarray) -> np.ndarray:
    """Per-cell sigma(f(x) . g(e)) from a text embedding; the token table is
    never consulted. Defined as sigma of the stored-precision inner product
    so it matches ground_text_raster values passed through sigma exactly."""
    z = inner_product_field(params, embedding, features)
    return _sigmoid(z.astype(np.float64)).astype(np.float32)


def zero_shot_raster(params: ModelParams, embedding: np.ndarray, width: int,
                     height: int, bbox: BBox = GLOBAL_BBOX,
                     cov: CovariateStack | None = None,
                     features: np.ndarray | None = None) -> RangeRaster:
    f = features if features is not None else grid_features(
        params, width, height, bbox, cov)
    values = zero_shot_scores(params, embedding, f)
    return RangeRaster(width=width, height=height, bbox=bbox,
                       values=values.astype(np.float32))


def ground_text_raster(params: ModelParams, embedding: np.ndarray, width: int,
                       height: int, bbox: BBox = GLOBAL_BBOX,
                       cov: CovariateStack | None = None,
                       features: np.ndarray | None = None) -> RangeRaster:
    """Raw per-cell inner product f(x) . g(e) (unsquashed concept map)."""
    f = features if features is not None else grid_features(
        params, width, height, bbox, cov)
    return RangeRaster(width=width, height=height, bbox=bbox,
                       values=inner_product_field(params, embedding, f))


def model_mean_scores(params: ModelParams, features: np.ndarray,
                      chunk: int = 512) -> np.ndarray:
    """Mean over all training species of sigma(f(x) . E_y), one shared field."""
    tokens = params.tokens.data.astype(np.float64)
    out = np.zeros(features.shape[0])
    for start in range(0, tokens.shape[0], chunk):
        block = tokens[start:start + chunk]
        out += _sigmoid(features @ block.T).sum(axis=1)
    return out / tokens.shape[0]


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@dataclass
class EvalTask:
    """One species to score: expert binary mask, its summary embeddings, and
    held-out observations for few-shot sampling."""

    species_id: int
    mask: RangeRaster
    range_embedding: np.ndarray | None = None
    habitat_embedding: np.ndarray | None = None
    heldout_obs: list[ObservationRecord] = field(default_factory=list)

    def __post_init__(self):
        labels = self.mask.values[self.mask.valid_mask] > 0.5
        if not labels.any() or labels.all():
            raise ConfigError(
                f"task {self.species_id}: mask needs >= 1 positive and >= 1 "
                "negative valid cell")


CONDITIONS = ("constant", "model_mean", "zeroshot_range", "zeroshot_habitat",
              "token_oracle", "fewshot_plain", "fewshot_prior")


@dataclass
class BenchmarkConfig:
    conditions: tuple[str, ...] = ("constant", "model_mean", "zeroshot_range",
                                   "zeroshot_habitat")
    width: int = 96
    height: int = 48
    bbox: BBox = GLOBAL_BBOX
    shots: tuple[int, ...] = (1, 2, 5, 10, 20, 50, 100)
    fewshot_seeds: tuple[int, ...] = (0,)
    fewshot_lam: float = 20.0
    fewshot_n_neg: int = 20000
    fewshot_max_iter: int = 500

    def __post_init__(self):
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}")


@dataclass
class BenchmarkReport:
    per_species: dict[str, dict[int, float]]
    map_scores: dict[str, float]
    skipped: dict[str, list[int]]
    metadata: dict

    def to_json(self) -> str:
        payload = {
            "per_species": {c: {str(k): v for k, v in sorted(d.items())}
                            for c, d in sorted(self.per_species.items())},
            "map": dict(sorted(self.map_scores.items())),
            "skipped": {c: sorted(v) for c, v in sorted(self.skipped.items())
                        if v},
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def report_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("condition,species_id,ap\n")
            for cond in sorted(self.per_species):
                for sid, ap in sorted(self.per_species[cond].items()):
                    f.write(f"{cond},{sid},{ap!r}\n")


def _task_labels(task: EvalTask) -> np.ndarray:
    return task.mask.values > 0.5


def run_benchmark(params: ModelParams, tasks: list[EvalTask],
                  config: BenchmarkConfig,
                  cov: CovariateStack | None = None,
                  train_observations: list[ObservationRecord] | None = None
                  ) -> BenchmarkReport:
    """Evaluate the requested conditions on every task and aggregate MAPs.

    Species missing what a condition needs (an embedding, held-out
    observations, a token row) are skipped for that condition and listed in
    the report."""
    feats = grid_features(params, config.width, config.height, config.bbox, cov)
    per: dict[str, dict[int, float]] = {}
    skipped: dict[str, list[int]] = {}

    def record(cond: str, sid: int, ap: float | None):
        if ap is None:
            skipped.setdefault(cond, []).append(sid)
        else:
            per.setdefault(cond, {})[sid] = ap

    mean_field = None
    if "model_mean" in config.conditions:
        mean_field = model_mean_scores(params, feats)

    for task in tasks:
        labels = _task_labels(task)
        mask = task.mask.valid_mask
        if "constant" in config.conditions:
            record("constant", task.species_id,
                   average_precision(np.zeros(labels.size), labels, mask))
        if "model_mean" in config.conditions:
            record("model_mean", task.species_id,
                   average_precision(mean_field, labels, mask))
        if "zeroshot_range" in config.conditions:
            ap = None
            if task.range_embedding is not None:
                scores = zero_shot_scores(params, task.range_embedding, feats)
                ap = average_precision(scores, labels, mask)
            record("zeroshot_range", task.species_id, ap)
        if "zeroshot_habitat" in config.conditions:
            ap = None
            if task.habitat_embedding is not None:
                scores = zero_shot_scores(params, task.habitat_embedding, feats)
                ap = average_precision(scores, labels, mask)
            record("zeroshot_habitat", task.species_id, ap)
        if "token_oracle" in config.conditions:
            ap = None
            row = params.species_index.get(task.species_id)
            if row is not None:
                scores = feats @ params.tokens.data[row].astype(np.float64)
                ap = average_precision(scores, labels, mask)
            record("token_oracle", task.species_id, ap)

    fewshot_conds = [c for c in config.conditions
                     if c in ("fewshot_plain", "fewshot_prior")]
    if fewshot_conds:
        _run_fewshot(params, tasks, config, feats, cov,
                     train_observations or [], fewshot_conds, record)

    maps = {}
    for cond, by_sid in per.items():
        maps[cond] = float(np.mean(list(by_sid.values()))) if by_sid else 0.0
    meta = {
        "width": config.width, "height": config.height,
        "shots": list(config.shots),
        "fewshot_seeds": list(config.fewshot_seeds),
        "species_count": len(params.species_ids),
        "conditions": list(config.conditions),
    }
    return BenchmarkReport(per_species=per, map_scores=maps, skipped=skipped,
                           metadata=meta)


def _run_fewshot(params, tasks, config, feats, cov, train_obs, conds, record):
    for task in tasks:
        labels = _task_labels(task)
        mask = task.mask.valid_mask
        prior_vec = None
        if task.range_embedding is not None:
            prior_vec = text_species_vector_np(
                params, task.range_embedding).astype(np.float64)
        for n_p in config.shots:
            if len(task.heldout_obs) < n_p:
                for cond in conds:
                    record(f"{cond}@{n_p}", task.species_id, None)
                continue
            ap_by_cond: dict[str, list[float]] = {c: [] for c in conds}
            for seed in config.fewshot_seeds:
                rng = np.random.default_rng([seed, task.species_id, n_p])
                pick = rng.choice(len(task.heldout_obs), size=n_p,
                                  replace=False)
                pos_pts = [task.heldout_obs[int(i)].location for i in pick]
                negs = sample_fewshot_negatives(train_obs,
                                                config.fewshot_n_neg, rng)
                for cond in conds:
                    prior = prior_vec if cond == "fewshot_prior" else None
                    if cond == "fewshot_prior" and prior is None:
                        continue
                    fit = fit_range_vector(params, pos_pts, negs,
                                           FewShotConfig(
                                               lam=config.fewshot_lam,
                                               n_neg=config.fewshot_n_neg,
                                               max_iter=config.fewshot_max_iter,
                                               prior=prior, seed=seed),
                                           feats, cov)
                    scores = (feats / fit.feature_scale) @ fit.w
                    ap_by_cond[cond].append(
                        average_precision(scores, labels, mask))
            for cond in conds:
                vals = ap_by_cond[cond]
                record(f"{cond}@{n_p}", task.species_id,
                       float(np.mean(vals)) if vals else None)


# ---------------------------------------------------------------------------
# PNG export
# ---------------------------------------------------------------------------

# Anchor colors along the viridis ramp (dark violet -> teal -> yellow).
_VIRIDIS_ANCHORS = np.array([
    (68, 1, 84), (71, 19, 101), (72, 36, 117), (70, 52, 128),
    (65, 68, 135), (59, 82, 139), (53, 95, 141), (47, 108, 142),
    (42, 120, 142), (37, 132, 142), (33, 145, 140), (30, 156, 137),
    (34, 168, 132), (47, 180, 124), (68, 191, 112), (94, 201, 98),
    (122, 209, 81), (155, 217, 60), (189, 223, 38), (223, 227, 24),
    (253, 231, 37),
], dtype=np.float64)


def viridis_lut() -> np.ndarray:
    """(256, 3) uint8 lookup table interpolated from the anchor ramp.
    Entries are made unique so PNG pixels invert to exactly one index."""
    xs = np.linspace(0.0, 1.0, len(_VIRIDIS_ANCHORS))
    ts = np.linspace(0.0, 1.0, 256)
    lut = np.stack([np.interp(ts, xs, _VIRIDIS_ANCHORS[:, c])
                    for c in range(3)], axis=1)
    lut = np.round(lut).astype(np.int64)
    seen = set()
    for i in range(256):
        bump = 0
        base_blue = lut[i, 2]
        while tuple(lut[i]) in seen:
            bump += 1
            lut[i, 2] = (base_blue + bump) % 256
        seen.add(tuple(lut[i]))
    return lut.astype(np.uint8)


_LUT = viridis_lut()


def quantize_values(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Map values to LUT indices 0..255 (the PNG's exact quantization)."""
    if vmax <= vmin:
        return np.zeros(values.shape, dtype=np.int64)
    t = (np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin)
    return np.clip(np.round(t * 255), 0, 255).astype(np.int64)


def raster_to_png(raster: RangeRaster, path, vmin: float | None = None,
                  vmax: float | None = None) -> None:
    """Write the raster as an RGBA PNG (row 0 = north, viridis-style ramp,
    invalid cells transparent)."""
    from PIL import Image

    valid = raster.valid_mask
    vals = raster.values.astype(np.float64)
    if vmin is None:
        vmin = float(vals[valid].min()) if valid.any() else 0.0
    if vmax is None:
        vmax = float(vals[valid].max()) if valid.any() else 1.0
    idx = quantize_values(vals, vmin, vmax)
    rgba = np.zeros((raster.height * raster.width, 4), dtype=np.uint8)
    rgba[:, :3] = _LUT[idx]
    rgba[:, 3] = np.where(valid, 255, 0)
    img = Image.fromarray(rgba.reshape(raster.height, raster.width, 4), "RGBA")
    img.save(path, format="PNG")


def top_decile_containment(raster: RangeRaster, reference: np.ndarray,
                           reference_quantile: float = 0.75) -> float:
    """Fraction of the raster's top-decile cells lying inside the reference
    field's top-(1-q) region; localization score for concept grounding."""
    valid = raster.valid_mask
    vals = raster.values[valid]
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)[valid]
    cutoff = np.quantile(vals, 0.9)
    top = vals >= cutoff
    ref_cut = np.quantile(ref, reference_quantile)
    inside = ref >= ref_cut
    if top.sum() == 0:
        return 0.0
    return float((top & inside).sum() / top.sum())
