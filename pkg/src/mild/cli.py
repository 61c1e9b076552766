"""Command-line front end.

Subcommands: generate, train, unmix, baseline, evaluate, verify-theorems,
pipeline, export-maps. Exit status is 0 on success, 1 on a runtime failure
and 2 on bad usage. Every output gets a ``*.manifest.json`` (or
``manifest.json`` for directories) recording how it was produced.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .dyncheck import run_suite
from .hsidata import (
    EndmemberSet,
    SequenceCube,
    read_abundances,
    read_cube,
    read_endmembers_csv,
    write_abundances,
    write_cube,
    write_endmembers_csv,
)
from .initbase import fcls_stack, vca
from .metrics import evaluate, export_maps
from .model import MildModel, TrainConfig, endmembers, infer_abundance, load_model, save_model, train
from .rng import Stream
from .synthgen import PRESETS, SynthSpec, generate

log = logging.getLogger("mild")

METRIC_FIELDS = ("dataset", "method", "seed", "nrmse_a", "nrmse_y")


class CommandError(RuntimeError):
    """A stage failed; the message carries the command context."""


# --------------------------------------------------------------------------
# helpers


def thread_count(args) -> int:
    n = getattr(args, "threads", None)
    if n is None:
        env = os.environ.get("MILD_THREADS")
        n = int(env) if env else 1
    return max(1, n)


def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(target: Path, command: str, config: dict, seeds, inputs, outputs,
                   started: float) -> Path:
    """RunManifest next to ``target`` (a file or an output directory)."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    _atomic_json(path, {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "config_hash": config_hash(config),
        "seeds": list(seeds),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_time": round(time.perf_counter() - started, 3),
    })
    return path


def load_train_config(args) -> TrainConfig:
    """JSON config (if any) overridden by explicit flags."""
    d = {}
    if getattr(args, "config", None):
        d.update(json.loads(Path(args.config).read_text()))
    for key, flag in (("epochs", "epochs"), ("lr", "lr"), ("alpha", "alpha"), ("beta", "beta"),
                      ("k_steps", "k"), ("seed", "seed"), ("endmember_count", "endmembers"),
                      ("batch_pixels", "batch_pixels")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


def _read_time_endmembers(path, t_count: int, p: int) -> EndmemberSet:
    rows = read_endmembers_csv(path)
    if rows.shape[0] == p:
        return EndmemberSet.constant(rows, t_count)
    if rows.shape[0] == t_count * p:
        per = rows.reshape(t_count, p, -1)
        return EndmemberSet(per.mean(axis=0), tuple(per))
    raise CommandError(f"{path}: expected {p} or {t_count * p} rows, found {rows.shape[0]}")


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS + (("wall_time",) if rows and "wall_time" in rows[0] else ()))
    for r in rows:
        out = [r["dataset"], r["method"], r["seed"], repr(r["nrmse_a"]), repr(r["nrmse_y"])]
        if "wall_time" in r:
            out.append(f"{r['wall_time']:.3f}")
        w.writerow(out)
    return buf.getvalue()


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    started = time.perf_counter()
    if args.spec:
        spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
        if args.seed is not None:
            spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    else:
        spec = PRESETS[args.preset](args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube, truth = generate(spec)
    files = [out / "cube.hsc", out / "truth.hsa", out / "endmembers.csv", out / "spec.json"]
    write_cube(files[0], cube)
    write_abundances(files[1], truth.abundances)
    write_endmembers_csv(files[2], truth.endmembers.reference)
    _atomic_json(files[3], spec.to_dict())
    write_manifest(out, "generate", spec.to_dict(), [spec.seed], [], files, started)
    print(f"wrote {cube.t_count}x{cube.height}x{cube.width}x{cube.bands} cube to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = load_train_config(args)
    cube = read_cube(args.cube)
    model, tlog = train(cube, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, cfg)
    write_manifest(out, "train", asdict(cfg), [cfg.seed], [args.cube], [out], started)
    print(f"trained {cfg.epochs} epochs in {tlog.seconds:.1f}s, final loss {tlog.final_loss:.6g}")
    return 0


def cmd_unmix(args) -> int:
    started = time.perf_counter()
    model, cfg = load_model(args.model)
    cube = read_cube(args.cube)
    a = infer_abundance(model, cube)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_abundances(out, a)
    outputs = [out]
    if args.endmembers_out:
        e = endmembers(model)
        write_endmembers_csv(args.endmembers_out, e.stacked().reshape(-1, e.bands))
        outputs.append(Path(args.endmembers_out))
    write_manifest(out, "unmix", asdict(cfg) if cfg else {}, [cfg.seed] if cfg else [],
                   [args.model, args.cube], outputs, started)
    return 0


def cmd_baseline(args) -> int:
    started = time.perf_counter()
    cube = read_cube(args.cube)
    if args.endmembers:
        ref = read_endmembers_csv(args.endmembers)
    else:
        if not args.p:
            raise CommandError("baseline needs --endmembers or -p for VCA extraction")
        ref = vca(cube, args.p, args.seed).endmembers
    a = fcls_stack(cube, EndmemberSet.constant(ref, cube.t_count), workers=thread_count(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_abundances(out, a)
    outputs = [out]
    if args.endmembers_out:
        write_endmembers_csv(args.endmembers_out, ref)
        outputs.append(Path(args.endmembers_out))
    write_manifest(out, "baseline", {"method": args.method, "p": args.p}, [args.seed],
                   [args.cube] + ([args.endmembers] if args.endmembers else []), outputs, started)
    return 0


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    cube = read_cube(args.cube)
    truth = read_abundances(args.truth, cube.height, cube.width)
    est = read_abundances(args.abundances, cube.height, cube.width)
    p = truth.endmember_count
    truth_e = EndmemberSet.constant(read_endmembers_csv(args.truth_endmembers), cube.t_count)
    est_e = _read_time_endmembers(args.endmembers, cube.t_count, p)
    rep = evaluate(truth, est, cube, est_e, truth_e=truth_e)
    row = {"dataset": args.dataset, "method": args.method, "seed": args.seed,
           "nrmse_a": rep.nrmse_a, "nrmse_y": rep.nrmse_y}
    if args.wall_time is not None:
        row["wall_time"] = args.wall_time
    text = metrics_csv([row])
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_manifest(out, "evaluate", {"dataset": args.dataset, "method": args.method},
                       [args.seed], [args.cube, args.truth, args.abundances], [out], started)
    sys.stdout.write(text)
    return 0


def random_cube(t_count: int, bands: int, seed: int, side: int = 8) -> SequenceCube:
    vals = Stream(seed, "verify-cube").uniform((t_count, side, side, bands), 0.05, 1.0)
    return SequenceCube(vals)


def cmd_verify(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models = []
    model_error = None
    if args.model:
        try:
            model, _ = load_model(args.model)
            cube = read_cube(args.cube) if args.cube else random_cube(model.t_count, model.bands, args.seed)
            models.append((str(args.model), model, cube))
        except Exception as exc:  # the analytic checks still run and are reported
            model_error = f"{args.model}: {exc}"
    if args.random_models:
        cube = random_cube(args.t, args.bands, args.seed)
        for i in range(args.random_models):
            m = MildModel.create(args.t, args.bands, args.endmembers, args.k, seed=args.seed + i)
            models.append((f"random-{args.seed + i}", m, cube))
    report = run_suite(models, args.eps, args.seed)
    if model_error:
        report["model_error"] = model_error
        report["passed"] = False
    _atomic_json(out, report)
    for section in ("truncation", "convergence", "stability"):
        for r in report[section]:
            name = r.get("problem", r.get("model"))
            print(f"{section:12s} {name:24s} {'PASS' if r['passed'] else 'FAIL'}")
    if model_error:
        print(f"mild verify-theorems: error: {model_error}", file=sys.stderr)
    return 0 if report["passed"] else 1


def cmd_export_maps(args) -> int:
    started = time.perf_counter()
    if args.cube:
        cube = read_cube(args.cube)
        h, w = cube.height, cube.width
    elif args.height and args.width:
        h, w = args.height, args.width
    else:
        raise CommandError("export-maps needs --cube or both --height and --width")
    a = read_abundances(args.abundances)
    files = export_maps(a, h, w, args.out)
    write_manifest(Path(args.out), "export-maps", {"height": h, "width": w}, [],
                   [args.abundances], files, started)
    return 0


def cmd_pipeline(args) -> int:
    """generate -> VCA + FCLS -> train MiLD -> unmix -> evaluate -> maps."""
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PRESETS[args.preset](args.seed)
    cfg = load_train_config(args)
    cfg = TrainConfig.from_dict({**asdict(cfg), "seed": args.seed,
                                 "endmember_count": spec.endmember_count})
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise CommandError(f"pipeline stage '{name}' failed: {exc}") from exc
        timings[name] = time.perf_counter() - t0
        log.info("%s done in %.1fs", name, timings[name])
        return result

    cube, truth = stage("generate", lambda: generate(spec))
    write_cube(out / "cube.hsc", cube)
    write_abundances(out / "truth.hsa", truth.abundances)
    write_endmembers_csv(out / "endmembers.csv", truth.endmembers.reference)
    _atomic_json(out / "spec.json", spec.to_dict())

    ref = stage("vca", lambda: vca(cube, spec.endmember_count, args.seed).endmembers)
    fcls_e = EndmemberSet.constant(ref, cube.t_count)
    a_fcls = stage("fcls", lambda: fcls_stack(cube, fcls_e, workers=thread_count(args)))
    write_abundances(out / "fcls.hsa", a_fcls)
    write_endmembers_csv(out / "fcls_endmembers.csv", ref)

    model, tlog = stage("mild", lambda: train(cube, cfg, init_reference=ref))
    save_model(out / "model.mldp", model, cfg)
    a_mild = stage("unmix", lambda: infer_abundance(model, cube))
    e_mild = endmembers(model)
    write_abundances(out / "mild.hsa", a_mild)
    write_endmembers_csv(out / "mild_endmembers.csv", e_mild.stacked().reshape(-1, e_mild.bands))

    rows = []
    for method, a, e, secs in (("fcls", a_fcls, fcls_e, timings["vca"] + timings["fcls"]),
                               ("mild", a_mild, e_mild, timings["mild"] + timings["unmix"])):
        rep = evaluate(truth.abundances, a, cube, e, truth_e=truth.endmembers)
        rows.append({"dataset": spec.preset, "method": method, "seed": args.seed,
                     "nrmse_a": rep.nrmse_a, "nrmse_y": rep.nrmse_y, "_secs": secs,
                     "_perm": list(rep.permutation)})
        if not args.no_maps:
            export_maps(a.permuted(rep.permutation), cube.height, cube.width, out / "maps", prefix=method)
    (out / "metrics.csv").write_text(metrics_csv([{k: v for k, v in r.items() if not k.startswith("_")}
                                                  for r in rows]))
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "seconds"))
        for r in rows:
            w.writerow((r["method"], f"{r['_secs']:.3f}"))
    write_manifest(out, "pipeline", {"preset": args.preset, "train": asdict(cfg)}, [args.seed], [],
                   sorted(p.name for p in out.iterdir()), started)
    for r in rows:
        print(f"{r['method']:5s} NRMSE_A {r['nrmse_a']:.4f}  NRMSE_Y {r['nrmse_y']:.4f}  "
              f"({r['_secs']:.1f}s)")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config; flags override its keys")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--k", type=int, help="fusion steps K on each side")
    p.add_argument("--batch-pixels", type=int, dest="batch_pixels")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mild", description="Multitemporal latent-dynamics unmixing")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, help="worker cap (default: $MILD_THREADS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--spec", help="JSON SynthSpec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a MiLD model")
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--endmembers", type=int, help="number of endmembers P")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unmix", help="abundances and endmembers from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endmembers-out", dest="endmembers_out")
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("baseline", help="classical baseline")
    p.add_argument("method", choices=["fcls"])
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endmembers", help="endmember CSV; default: VCA with -p")
    p.add_argument("-p", type=int, help="endmember count for VCA")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--endmembers-out", dest="endmembers_out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="NRMSE of an estimate against ground truth")
    p.add_argument("--cube", required=True)
    p.add_argument("--truth", required=True, help="ground-truth abundances (.hsa)")
    p.add_argument("--truth-endmembers", required=True, dest="truth_endmembers")
    p.add_argument("--abundances", required=True)
    p.add_argument("--endmembers", required=True, help="estimated endmembers (P or T*P rows)")
    p.add_argument("--dataset", default="custom")
    p.add_argument("--method", default="unknown")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wall-time", type=float, dest="wall_time")
    p.add_argument("--out", help="CSV file to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-theorems", help="numerical consistency/convergence/stability checks")
    p.add_argument("--model")
    p.add_argument("--cube", help="cube for the model's stability check")
    p.add_argument("--out", default="theorems.json")
    p.add_argument("--random-models", type=int, default=10, dest="random_models")
    p.add_argument("--t", type=int, default=6)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--endmembers", type=int, default=3)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="generate, train, baseline and evaluate in one go")
    p.add_argument("--preset", choices=sorted(PRESETS), default="synth1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-maps", action="store_true", dest="no_maps")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export-maps", help="write PGM abundance maps")
    p.add_argument("--abundances", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cube", help="take height/width from this cube")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_export_maps)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"mild {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
