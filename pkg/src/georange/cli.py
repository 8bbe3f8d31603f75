"""Command-line operator surface.

Subcommands: synth, train, predict, fewshot, eval, ground, serve, and
mock-embedder (a deterministic stand-in embedding service for demos/tests).

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import (EmbeddingClient, EmbeddingClientConfig, EmbeddingStore,
                   SyntheticWorldSpec, TextKind, generate_synthetic_world,
                   load_observations, load_world, save_world)
from .errors import ConfigError, FormatError, NumericError
from .evals import (BenchmarkConfig, EvalTask, ground_text_raster,
                    raster_to_png, run_benchmark, zero_shot_raster)
from .fewshot import (FewShotConfig, fit_range_vector,
                      predict_fewshot_raster, sample_fewshot_negatives)
from .geo import CovariateStack, GeoPoint
from .model import load_checkpoint
from .training import TrainConfig, TrainData, train

_USAGE_ERR = 1
_DATA_ERR = 2
_NUMERIC_ERR = 3


def _fail(kind: str, message: str, code: int) -> int:
    print(f"georange: {kind}: {message}", file=sys.stderr)
    return code


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError(f"grid must look like 96x48, got {text!r}") from None


def _load_embedding_arg(args) -> np.ndarray:
    if getattr(args, "embedding", None):
        vec = np.load(args.embedding)
        return np.asarray(vec, dtype=np.float32).reshape(-1)
    if getattr(args, "text", None):
        if not args.embed_url:
            raise ConfigError(
                "--text needs an embedding endpoint; pass --embed-url or set "
                "GEORANGE_EMBED_URL")
        client = EmbeddingClient(EmbeddingClientConfig(
            url=args.embed_url, dim=args.embed_dim,
            auth_token_env="GEORANGE_EMBED_TOKEN"))
        return client.fetch(args.text)
    raise ConfigError("need --embedding FILE or --text STRING")


def _world_train_data(world_dir, env: bool) -> tuple[TrainData, dict]:
    world = load_world(world_dir)
    train_obs = [r for r in world.observations
                 if r.species_id in set(world.train_ids)]
    counts: dict[int, int] = {}
    for r in train_obs:
        counts[r.species_id] = counts.get(r.species_id, 0) + 1
    from .data import DatasetManifest
    manifest = DatasetManifest(species_counts=counts, pre_counts=counts,
                               held_out=world.held_out_ids, cap=0)
    data = TrainData(observations=train_obs, manifest=manifest,
                     embeddings=world.embeddings,
                     covariates=world.covariates if env else None)
    return data, {"world": world}


def cmd_synth(args) -> int:
    spec_kwargs = {}
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as f:
            spec_kwargs = json.load(f)
    if args.seed is not None:
        spec_kwargs["seed"] = args.seed
    spec = SyntheticWorldSpec(**spec_kwargs)
    world = generate_synthetic_world(spec)
    save_world(world, args.out)
    print(f"wrote synthetic world to {args.out} "
          f"({len(world.observations)} observations, "
          f"{len(world.species_params)} species)")
    return 0


def cmd_train(args) -> int:
    cov = None
    if args.world:
        data, _ = _world_train_data(args.world, args.env)
    else:
        if not args.obs:
            raise ConfigError("need --world DIR or --obs FILE")
        held_out = [int(x) for x in args.heldout.split(",")] if args.heldout \
            else []
        records, manifest = load_observations(args.obs, cap=args.cap,
                                              seed=args.seed or 0,
                                              held_out=held_out)
        embeddings = EmbeddingStore.load(args.embeddings) if args.embeddings \
            else None
        if args.covariates:
            cov = CovariateStack.load(args.covariates)
        data = TrainData(observations=records, manifest=manifest,
                         embeddings=embeddings, covariates=cov)
    config = TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                         batch_size=args.batch_size, m=args.m,
                         lam_pos=args.lam_pos, seed=args.seed or 0,
                         env=args.env)
    report_path = args.report or (str(args.out) + ".report.ndjson")
    _, report = train(data, config, checkpoint_path=args.out,
                      report_path=report_path)
    last = report[-1] if report else {}
    print(f"wrote checkpoint {args.out}"
          + (f" (final token loss {last['token_loss']:.4f})" if report else ""))
    return 0


def cmd_predict(args) -> int:
    params = load_checkpoint(args.ckpt)
    vec = _load_embedding_arg(args)
    w, h = _parse_grid(args.grid)
    cov = CovariateStack.load(args.covariates) if args.covariates else None
    raster = zero_shot_raster(params, vec, w, h, cov=cov)
    raster.save(args.out)
    if args.png:
        raster_to_png(raster, args.png)
    print(f"wrote raster {args.out}")
    return 0


def cmd_ground(args) -> int:
    params = load_checkpoint(args.ckpt)
    vec = _load_embedding_arg(args)
    w, h = _parse_grid(args.grid)
    cov = CovariateStack.load(args.covariates) if args.covariates else None
    raster = ground_text_raster(params, vec, w, h, cov=cov)
    raster.save(args.out)
    if args.png:
        raster_to_png(raster, args.png)
    print(f"wrote inner-product raster {args.out}")
    return 0


def cmd_fewshot(args) -> int:
    params = load_checkpoint(args.ckpt)
    records, _ = load_observations(args.obs, cap=10**9, seed=args.seed or 0)
    if not records:
        raise ConfigError("no positive observations in the input file")
    cov = CovariateStack.load(args.covariates) if args.covariates else None
    prior = None
    if args.embedding or args.text:
        from .model import text_species_vector_np
        prior = text_species_vector_np(
            params, _load_embedding_arg(args)).astype(np.float64)
    rng = np.random.default_rng(args.seed or 0)
    train_obs = []
    if args.train_obs:
        train_obs, _ = load_observations(args.train_obs, cap=10**9, seed=0)
    negatives = sample_fewshot_negatives(train_obs, args.n_neg, rng)
    w, h = _parse_grid(args.grid)
    from .fewshot import grid_features
    feats = grid_features(params, w, h, cov=cov)
    fit = fit_range_vector(params, [r.location for r in records], negatives,
                           FewShotConfig(lam=args.lam, n_neg=args.n_neg,
                                         prior=prior, seed=args.seed or 0),
                           feats, cov)
    raster = predict_fewshot_raster(params, fit, w, h, cov=cov,
                                    features=feats)
    raster.save(args.out)
    if args.png:
        raster_to_png(raster, args.png)
    print(f"wrote few-shot raster {args.out} "
          f"(converged={fit.converged}, iterations={fit.iterations})")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    world = load_world(args.world)
    which = world.held_out_ids if args.split == "heldout" else world.train_ids
    tasks = []
    for sid in which:
        obs = [r for r in world.observations if r.species_id == sid]
        rng_rec = world.embeddings.summary(sid, TextKind.RANGE_SUMMARY)
        hab_rec = world.embeddings.summary(sid, TextKind.HABITAT_SUMMARY)
        tasks.append(EvalTask(
            species_id=sid, mask=world.truth[sid],
            range_embedding=rng_rec.vector if rng_rec else None,
            habitat_embedding=hab_rec.vector if hab_rec else None,
            heldout_obs=obs))
    conditions = tuple(args.conditions.split(","))
    shots = tuple(int(x) for x in args.shots.split(",")) if args.shots else \
        (1, 2, 5, 10, 20, 50, 100)
    seeds = tuple(int(x) for x in args.seeds.split(","))
    w, h = _parse_grid(args.grid)
    cov = world.covariates if args.env else None
    train_obs = [r for r in world.observations
                 if r.species_id in set(world.train_ids)]
    report = run_benchmark(params, tasks, BenchmarkConfig(
        conditions=conditions, width=w, height=h, shots=shots,
        fewshot_seeds=seeds, fewshot_n_neg=args.n_neg), cov=cov,
        train_observations=train_obs)
    report.save_json(args.out)
    report.save_csv(os.path.splitext(str(args.out))[0] + ".csv")
    for cond in sorted(report.map_scores):
        print(f"{cond}: MAP {report.map_scores[cond]:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, build_state, create_app

    with open(args.config, "r", encoding="utf-8") as f:
        cfg = ServiceConfig(**json.load(f))
    app = create_app(build_state(cfg))
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
    return 0


def cmd_mock_embedder(args) -> int:
    import uvicorn

    from .service import create_mock_embedder_app

    fixtures = {}
    if args.fixtures:
        with open(args.fixtures, "r", encoding="utf-8") as f:
            fixtures = json.load(f)
    app = create_mock_embedder_app(dim=args.dim, fixtures=fixtures)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="georange")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, grid_default="96x48"):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--grid", default=grid_default,
                        help="evaluation grid WxH")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic benchmark world")
    sp.add_argument("--spec", help="JSON file of world parameters")
    common(sp)

    sp = sub.add_parser("train", help="train a checkpoint")
    sp.add_argument("--world", help="synthetic world directory")
    sp.add_argument("--obs", help="observations CSV/binary")
    sp.add_argument("--embeddings", help="embedding store file")
    sp.add_argument("--covariates", help="covariate stack file")
    sp.add_argument("--heldout", help="comma-separated held-out species ids")
    sp.add_argument("--cap", type=int, default=1000)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=0.0005)
    sp.add_argument("--batch-size", type=int, default=2048)
    sp.add_argument("--m", type=int, default=192)
    sp.add_argument("--lam-pos", type=float, default=2048.0)
    sp.add_argument("--env", action="store_true",
                    help="append environmental covariates to the inputs")
    sp.add_argument("--report", help="per-epoch NDJSON report path")
    common(sp)

    for name, help_text in (("predict", "zero-shot raster from an embedding"),
                            ("ground", "raw inner-product concept raster")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--embedding", help=".npy embedding vector")
        sp.add_argument("--text", help="text to embed via the service")
        sp.add_argument("--embed-url",
                        default=os.environ.get("GEORANGE_EMBED_URL"))
        sp.add_argument("--embed-dim", type=int, default=4096)
        sp.add_argument("--covariates")
        sp.add_argument("--png", help="also write a PNG rendering")
        common(sp)

    sp = sub.add_parser("fewshot", help="few-shot raster from observations")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--obs", required=True, help="positive observations CSV")
    sp.add_argument("--train-obs", help="training observations for negatives")
    sp.add_argument("--embedding", help=".npy prior embedding")
    sp.add_argument("--text", help="prior text to embed via the service")
    sp.add_argument("--embed-url", default=os.environ.get("GEORANGE_EMBED_URL"))
    sp.add_argument("--embed-dim", type=int, default=4096)
    sp.add_argument("--covariates")
    sp.add_argument("--lam", type=float, default=20.0)
    sp.add_argument("--n-neg", type=int, default=20000)
    sp.add_argument("--png")
    common(sp)

    sp = sub.add_parser("eval", help="benchmark a checkpoint on a world")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--world", required=True)
    sp.add_argument("--split", choices=("heldout", "train"), default="heldout")
    sp.add_argument("--conditions",
                    default="constant,model_mean,zeroshot_range,"
                            "zeroshot_habitat")
    sp.add_argument("--shots", help="comma-separated few-shot counts")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--n-neg", type=int, default=20000)
    sp.add_argument("--env", action="store_true")
    common(sp)

    sp = sub.add_parser("serve", help="start the HTTP service")
    sp.add_argument("--config", required=True, help="service config JSON")

    sp = sub.add_parser("mock-embedder",
                        help="deterministic embedding service for demos")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8901)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--fixtures", help="JSON text->vector map")

    return p


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "ground": cmd_ground,
    "fewshot": cmd_fewshot,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "mock-embedder": cmd_mock_embedder,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else _USAGE_ERR
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        return _fail("usage error", str(e), _USAGE_ERR)
    except (FormatError, FileNotFoundError) as e:
        return _fail("data error", str(e), _DATA_ERR)
    except (NumericError, ConnectionError) as e:
        return _fail("numeric error" if isinstance(e, NumericError)
                     else "embedding-service error", str(e), _NUMERIC_ERR)


if __name__ == "__main__":
    sys.exit(main())
