"""``mca-forge`` command line. Exit codes: 0 ok, 1 domain error, 2 usage error."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("mca_forge")

SEED_ENV = "MCA_FORGE_SEED"


class UsageError(Exception):
    pass


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        seed = int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    if not 0 <= seed < 2**64:
        raise UsageError(f"{SEED_ENV} must be a u64")
    return seed


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# --------------------------------------------------------------------------
# subcommands


def cmd_schedule_check(args) -> int:
    from .schedule import parse_schedule

    text = Path(args.file).read_text(encoding="utf-8")
    pol = parse_schedule(text)
    print(f"ok: task={pol.task} rules={len(pol.rules)}")
    return 0


def cmd_schedule_render(args) -> int:
    from .schedule import load_schedule, render_schedule

    sys.stdout.write(render_schedule(load_schedule(args.name)))
    return 0


def cmd_train_toy(args) -> int:
    from .denoiser import TrainConfig, save_model, train_default

    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.seed is not None or os.environ.get(SEED_ENV):
        raw["seed"] = resolve_seed(args.seed)
    cfg = TrainConfig.from_dict(raw)
    every = max(1, cfg.steps // 10)

    def progress(step, loss):
        if (step + 1) % every == 0:
            log.info("step %d/%d loss %.5f", step + 1, cfg.steps, loss)

    res = train_default(cfg, progress)
    out = Path(args.out)
    save_model(res.model, out / "model")
    (out / "losses.json").write_text(json.dumps(res.losses) + "\n", encoding="utf-8")
    n = max(1, len(res.losses) // 10)
    if res.losses:
        first, last = sum(res.losses[:n]) / n, sum(res.losses[-n:]) / n
        print(f"trained {cfg.steps} steps: loss {first:.4f} -> {last:.4f}; model at {out / 'model'}")
    else:
        print(f"0 steps; untrained model at {out / 'model'}")
    return 0


def cmd_sample_pair(args) -> int:
    import numpy as np

    from .denoiser import alignment_metric, load_model, sample_pair
    from .scenes import ClipDims, edit_mask, pair_conditions
    from .schedule import load_schedule

    model = load_model(args.model)
    policy = load_schedule(args.schedule)
    seed = resolve_seed(args.seed)
    c = model.config.channels
    dims = ClipDims(args.frames, args.size, args.size, c)
    if args.src_cond is not None and args.tar_cond is not None:
        src_c, tar_c = args.src_cond, args.tar_cond
    else:
        src_c, tar_c = pair_conditions(args.edit, np.random.default_rng([seed, 1]))
    src, tar = sample_pair(model, src_c, tar_c, policy, args.steps, seed, not args.independent_noise, dims)
    out = Path(args.out)
    src.save(out / "src.mcat")
    tar.save(out / "tar.mcat")
    mask = edit_mask((src_c,) * dims.frames, (tar_c,) * dims.frames, 0, dims)
    mse = alignment_metric(src, tar, mask)
    print(f"src_cond={src_c} tar_cond={tar_c} schedule={policy.task} unedited_mse={mse:.6g}")
    return 0


def cmd_pipeline_run(args) -> int:
    from .pipeline.runner import PipelineConfig, run_pipeline

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    res = run_pipeline(cfg, resolve_seed(args.seed), args.out, workers=args.workers)
    s = res.summary
    print(json.dumps(s, sort_keys=True))
    if not s["complete"]:
        log.error("run stopped at %s: %s", s["stopped_at"], s["error"])
        return 1
    return 0


def cmd_pipeline_inspect(args) -> int:
    from .pipeline.records import STAGES, check_monotone, count_outcomes, read_manifest

    entries = read_manifest(args.manifest)
    counts = count_outcomes(entries)
    print(f"records: {counts['submitted']}")
    print(f"verified: {counts['verified']}")
    for s in STAGES:
        print(f"rejected at {s}: {counts['rejected'][s]}")
    bad = check_monotone(entries)
    conserved = counts["verified"] + sum(counts["rejected"].values()) == counts["submitted"]
    print(f"conservation: {'ok' if conserved else 'VIOLATED'}")
    if bad:
        print(f"non-monotone records: {', '.join(bad)}")
    return 0 if conserved and not bad else 1


def _make_judge(spec: str, root: Path, sigma: float):
    from . import bench
    from .pipeline.backends import HttpClient

    if spec == "mock":
        return bench.MockBenchJudge()
    if spec == "proxy":
        return bench.ProxyJudge(root, sigma)
    if spec.startswith(("http://", "https://")):
        return bench.HttpBenchJudge(HttpClient(spec))
    raise UsageError(f"--judge must be mock, proxy or an http(s) URL, got {spec!r}")


def cmd_bench_score(args) -> int:
    from . import bench

    manifest = Path(args.manifest)
    judge = _make_judge(args.judge, manifest.parent, args.sigma)
    cases = bench.load_cases(manifest)
    if not cases:
        log.error("no scorable cases in %s", manifest)
        return 1
    scored = [(c, bench.score_sample(c, judge)) for c in cases]
    clamped = sum(s.clamped for _, s in scored)
    if clamped:
        log.warning("%d case(s) had scores clamped into [1, 5]", clamped)
    table = bench.render_table(bench.aggregate(scored).rows(), args.name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mca-forge", description="Toy mutual-context attention toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sch = sub.add_parser("schedule", help="schedule files").add_subparsers(dest="action", metavar="ACTION")
    sch.required = True
    c = sch.add_parser("check", help="parse and validate a schedule file")
    c.add_argument("file")
    c.set_defaults(func=cmd_schedule_check)
    c = sch.add_parser("render", help="print a preset or schedule in canonical form")
    c.add_argument("name", help="preset name, all-<variant>, or a file")
    c.set_defaults(func=cmd_schedule_render)

    c = sub.add_parser("train-toy", help="train the toy denoiser")
    c.add_argument("--config", help="JSON training config (defaults if omitted)")
    c.add_argument("--seed", type=_u64)
    c.add_argument("--out", default="out/train")
    c.set_defaults(func=cmd_train_toy)

    c = sub.add_parser("sample-pair", help="jointly sample a source/target pair")
    c.add_argument("--model", required=True, help="checkpoint directory")
    c.add_argument("--schedule", required=True, help="preset name, all-<variant>, or a file")
    c.add_argument("--edit", default="insert", choices=("insert", "remove", "recolor", "move", "background"))
    c.add_argument("--src-cond", type=int)
    c.add_argument("--tar-cond", type=int)
    c.add_argument("--steps", type=_positive, default=50)
    c.add_argument("--frames", type=_positive, default=8)
    c.add_argument("--size", type=_positive, default=8)
    c.add_argument("--independent-noise", action="store_true")
    c.add_argument("--seed", type=_u64)
    c.add_argument("--out", default="out/sample")
    c.set_defaults(func=cmd_sample_pair)

    pl = sub.add_parser("pipeline", help="data pipeline").add_subparsers(dest="action", metavar="ACTION")
    pl.required = True
    c = pl.add_parser("run", help="run the five-stage pipeline")
    c.add_argument("--config", help="JSON pipeline config (defaults if omitted)")
    c.add_argument("--seed", type=_u64)
    c.add_argument("--workers", type=_positive, default=1)
    c.add_argument("--out", default="out/pipeline")
    c.set_defaults(func=cmd_pipeline_run)
    c = pl.add_parser("inspect", help="summarize a manifest")
    c.add_argument("manifest")
    c.set_defaults(func=cmd_pipeline_inspect)

    b = sub.add_parser("bench", help="benchmark scoring").add_subparsers(dest="action", metavar="ACTION")
    b.required = True
    c = b.add_parser("score", help="score cases and write a table")
    c.add_argument("--manifest", required=True, help="bench-case JSONL or a pipeline manifest")
    c.add_argument("--judge", default="mock", help="mock, proxy, or an http(s) endpoint")
    c.add_argument("--sigma", type=float, default=0.1, help="proxy decay scale")
    c.add_argument("--name", default="Method", help="first column header")
    c.add_argument("--out", default="out/bench/table.txt")
    c.set_defaults(func=cmd_bench_score)

    c = sub.add_parser("selftest", help="run the built-in invariant checks")
    c.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .errors import McaError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mca-forge: error: {exc}", file=sys.stderr)
        return 2
    except (McaError, OSError, ValueError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"mca-forge: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
