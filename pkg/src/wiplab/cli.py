"""Command-line entry point wiring the run config to every pipeline.

Subcommands: train, eval, compare, sweep, estimate, build-cache, export.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.  Every run
directory receives a manifest (normalized config snapshot + git hash) that
suffices to reproduce the run bit-for-bit in single-worker mode.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as ev
from . import ffv, nn, ppo
from .config import ConfigInvalid, RunConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(out_dir: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "git_hash": _git_hash(),
        "config": cfg.data,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.yaml").write_text(
        yaml.safe_dump(manifest, sort_keys=True, default_flow_style=None))


def _load_controller(spec: str, cfg: RunConfig):
    """'lqr' or a checkpoint path."""
    if spec == "lqr":
        Q, R = cfg.lqr_weights()
        return ev.LqrEvalController(cfg.wip_params(), Q=Q, R=R)
    return ev.PolicyController.from_file(spec)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    variant = args.variant or cfg.data["train"]["variant"]
    seed = cfg.seed if args.seed is None else args.seed

    if variant == "student":
        if not args.teacher:
            print("variant 'student' requires --teacher <checkpoint>", file=sys.stderr)
            return EXIT_CONFIG
        teacher = nn.load_checkpoint(args.teacher)
        ts = cfg.train_settings(variant="teacher", seed=seed)
        ckpt, report = ppo.distill_student(teacher, ts, cfg.distill_settings())
        nn.save_checkpoint(out_dir / "checkpoint.ckpt", ckpt)
        (out_dir / "distill_report.json").write_text(json.dumps(report, sort_keys=True, indent=1))
        _write_manifest(out_dir, cfg, "train",
                        {"variant": "student", "seed": seed, "teacher": str(args.teacher)})
        print(f"student checkpoint written to {out_dir / 'checkpoint.ckpt'} "
              f"(holdout MSE {report['holdout_mse']:.3e})")
        return EXIT_OK

    ts = cfg.train_settings(variant=variant, seed=seed)
    ckpt, _metrics = ppo.train(
        ts, metrics_path=out_dir / "metrics.csv", log_every=args.log_every,
        abort_checkpoint_path=out_dir / "checkpoint_aborted.ckpt")
    nn.save_checkpoint(out_dir / "checkpoint.ckpt", ckpt)
    _write_manifest(out_dir, cfg, "train", {"variant": variant, "seed": seed})
    print(f"checkpoint written to {out_dir / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    controller = _load_controller(args.checkpoint if not args.lqr else "lqr", cfg)
    friction = _parse_friction(args.friction) if args.friction else None
    ecfg = cfg.eval_config(seed=args.seed, episodes=args.episodes,
                           friction=friction, mu_input=args.mu_input)
    records = ev.evaluate(controller, ecfg)
    ev.write_records(out_dir / "records.jsonl", records)
    summary = ev.summarize(records)
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    _write_manifest(out_dir, cfg, "eval", {"controller": "lqr" if args.lqr else str(args.checkpoint)})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    controllers: dict[str, object] = {}
    for item in args.checkpoint or []:
        if "=" not in item:
            print(f"--checkpoint wants name=path, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        name, path = item.split("=", 1)
        controllers[name] = _load_controller(path, cfg)
    if args.lqr:
        controllers["lqr"] = _load_controller("lqr", cfg)
    if not controllers:
        print("compare needs at least one --checkpoint or --lqr", file=sys.stderr)
        return EXIT_CONFIG
    ecfg = cfg.eval_config(seed=args.seed, episodes=args.episodes)
    all_records, rows = ev.compare(controllers, ecfg)
    for name, records in all_records.items():
        ev.write_records(out_dir / f"records_{name}.jsonl", records)
    (out_dir / "comparison.json").write_text(json.dumps(rows, sort_keys=True, indent=1))
    _write_manifest(out_dir, cfg, "compare", {"controllers": sorted(controllers)})
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    controller = _load_controller(args.checkpoint if not args.lqr else "lqr", cfg)
    mu_inputs = [float(v) for v in args.mu_input.split(",")] if args.mu_input else None
    mu_actual = _parse_friction(args.mu_actual) if args.mu_actual else None
    spec = cfg.sweep_spec(mu_inputs=mu_inputs, mu_actual=mu_actual, trials=args.trials)
    ecfg = cfg.eval_config(seed=args.seed)
    rows = ev.sweep_cof(controller, spec, ecfg)
    with open(out_dir / "sweep.csv", "w") as f:
        f.write("mu_input,trials,trials_succeeded,success_rate,mean_rms_error\n")
        for r in rows:
            f.write(f"{r['mu_input']},{r['trials']},{r['trials_succeeded']},"
                    f"{r['success_rate']},{r['mean_rms_error']}\n")
    _write_manifest(out_dir, cfg, "sweep", {"spec": {
        "mu_inputs": list(spec.mu_inputs), "mu_actual": spec.mu_actual,
        "trials": spec.trials}})
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_estimate(args, cfg: RunConfig) -> int:
    cache_path = args.cache or cfg.data["ffv"]["cache"]
    if cache_path is None:
        print("estimate needs --cache (or ffv.cache in the config)", file=sys.stderr)
        return EXIT_CONFIG
    if args.validate_cache:
        try:
            cache, warnings = ffv.load_cache(cache_path)
        except ffv.CacheFormatError as e:
            print(f"cache invalid: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"cache ok: {cache.n_image} image / {cache.n_text} text records, "
              f"dimension {cache.dimension}")
        for w in warnings:
            print(f"warning: {w}")
        return EXIT_OK

    cache, warnings = ffv.load_cache(cache_path)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)

    client_cfg = cfg.data["ffv"]["client"]
    if args.live:
        import os
        endpoint = os.environ.get("FFV_ENDPOINT", client_cfg["endpoint"])
        if not os.environ.get("FFV_API_KEY"):
            print("--live requires the FFV_API_KEY environment variable", file=sys.stderr)
            return EXIT_CONFIG
        client = ffv.HttpClient(endpoint, client_cfg["model"],
                                timeout_s=float(client_cfg["timeout_s"]))
    else:
        fixture = args.mock or client_cfg["mock_fixture"]
        if fixture is None:
            print("mock backend needs --mock <fixture> (or ffv.client.mock_fixture)",
                  file=sys.stderr)
            return EXIT_CONFIG
        client = ffv.MockClient.from_fixture(fixture)

    if args.embedding_id:
        query = args.embedding_id
    elif args.image:
        matches = [r for r in cache.image_records if r.payload.get("path") == args.image]
        if not matches:
            print(f"no cached embedding for image {args.image!r}; encode it first "
                  f"(see the embedding tool) or pass --embedding-id", file=sys.stderr)
            return EXIT_RUNTIME
        query = matches[0].id
    else:
        print("estimate needs --embedding-id or --image", file=sys.stderr)
        return EXIT_CONFIG

    est = ffv.estimate(query, cache, k=args.k or int(cfg.data["ffv"]["k"]), client=client,
                       image_path=args.image if args.live else None,
                       attempts=int(client_cfg["attempts"]),
                       backoff_s=float(client_cfg["backoff_s"]))
    print(f"mu_hat: {est.mu_hat}")
    print(f"latency_s: {est.latency_s:.3f}  retries: {est.retries}")
    print("top image hits:")
    for h in est.image_hits:
        print(f"  {h.id}  score={h.score:.4f}")
    print("top text hits:")
    for h in est.text_hits:
        print(f"  {h.id}  score={h.score:.4f}")
    return EXIT_OK


def cmd_build_cache(args, cfg: RunConfig) -> int:
    caches = []
    for path in args.records:
        cache, warnings = ffv.load_cache(path)
        for w in warnings:
            print(f"warning ({path}): {w}", file=sys.stderr)
        caches.append(cache)
    dim = caches[0].dimension
    for c, path in zip(caches, args.records):
        if c.dimension != dim:
            print(f"dimension mismatch: {path} has {c.dimension}, expected {dim}",
                  file=sys.stderr)
            return EXIT_RUNTIME
    records = [r for c in caches for r in c.records]
    merged = ffv.EmbeddingCache(dim, records, meta=caches[0].meta)
    if args.out:
        merged.save(args.out)
        print(f"merged cache written to {args.out} "
              f"({merged.n_image} image / {merged.n_text} text records)")
    else:
        print(f"validated {len(records)} records (dimension {dim})")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    run_dir = Path(args.run_dir)
    record_files = sorted(run_dir.glob("records*.jsonl"))
    if not record_files:
        print(f"no records*.jsonl under {run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    out_dir = Path(args.out) if args.out else run_dir / "plot_data"
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = 0
    for rf in record_files:
        records = ev.read_records(rf)
        name = rf.stem.replace("records_", "") if rf.stem != "records" else "run"
        try:
            n = ev.export_plots(records, out_dir / f"trajectory_{name}.csv")
        except ev.NoSuccessfulEpisodes:
            print(f"{rf.name}: no successful episodes, skipped", file=sys.stderr)
            continue
        print(f"{rf.name}: exported mean trajectory of {n} successful episodes")
        wrote += 1
    if wrote == 0:
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wiplab",
        description="Friction-aware wheeled-inverted-pendulum laboratory")
    parser.add_argument("--config", help="YAML run config (defaults embedded)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set ppo.iterations=50")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy variant")
    p.add_argument("--variant", choices=list(ppo.VARIANTS) + ["student"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", help="teacher checkpoint (student variant)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the LQR baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--lqr", action="store_true")
    p.add_argument("--episodes", type=int)
    p.add_argument("--friction", help="fixed value or lo,hi")
    p.add_argument("--mu-input", help="'true', 'noisy', or a pinned value")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired comparison of several controllers")
    p.add_argument("--checkpoint", action="append", metavar="NAME=PATH")
    p.add_argument("--lqr", action="store_true")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="input-CoF sensitivity sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--lqr", action="store_true")
    p.add_argument("--mu-input", help="comma-separated grid, e.g. 0.5,1.0,1.5")
    p.add_argument("--mu-actual", help="fixed value or lo,hi")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("estimate", help="friction-from-vision estimate")
    p.add_argument("--embedding-id")
    p.add_argument("--image")
    p.add_argument("--cache")
    p.add_argument("--k", type=int)
    p.add_argument("--mock", help="fixture file with scripted responses")
    p.add_argument("--live", action="store_true")
    p.add_argument("--validate-cache", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("build-cache", help="validate/merge embedding record files")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("export", help="export plot-data CSVs from a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        return args.func(args, cfg)
    except ConfigInvalid as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (nn.CheckpointLoad, ffv.FfvError, ev.EvalError, ppo.PpoError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _parse_friction(text: str):
    if "," in text:
        lo, hi = text.split(",", 1)
        return (float(lo), float(hi))
    return float(text)


if __name__ == "__main__":
    sys.exit(main())
