"""``mhmamba`` command line: phantom, train, infer, eval, gradcheck, bench.

Exit codes: 0 success, 1 numeric failure (gradient error too large, non-finite
loss), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import autodiff as ad
from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (PhantomSpec, VolumeFormatError, generate_phantom, read_header, read_volume,
                   sliding_window_infer, write_volume)
from .metrics import average_reports, evaluate
from .network import MHMambaNet
from .training import LOG_HEADER, NonFiniteLossError, train

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"
IMAGE_SUFFIX, LABEL_SUFFIX, PRED_SUFFIX = "_image", "_label", "_pred"


class UsageError(Exception):
    pass


def version_tag() -> str:
    """``git describe`` of the source tree when available, else ``v<package version>``."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(out_dir: Path, subcommand: str, cfg, seed, outputs, extra=None) -> Path:
    manifest = {
        "subcommand": subcommand,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": seed,
        "version": version_tag(),
        "outputs": sorted(str(p) for p in outputs),
    }
    if extra:
        manifest["arguments"] = extra
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def resolve_config(args) -> config_mod.RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"{s}.seed={args.seed}" for s in ("network", "train", "data")]
    return config_mod.load(args.config, overrides)


def _phantom_spec(dims, noise, seed) -> PhantomSpec:
    # default geometry is laid out for 64^3; shrink it with the smallest side
    s = min(dims) / 64
    base = PhantomSpec()
    return PhantomSpec(dims=dims, radii=tuple(tuple(r * s for r in rr) for rr in base.radii),
                       jitter=max(1.0, round(base.jitter * s)), noise=noise, seed=seed)


def _cases(directory: Path, suffix: str) -> dict[str, Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    found = {}
    for hdr in sorted(directory.glob(f"*{suffix}.json")):
        found[hdr.name[: -len(suffix) - 5]] = hdr.with_suffix("")
    if not found:
        raise FileNotFoundError(f"no *{suffix} volumes in {directory}")
    return found


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# subcommands ------------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args.out)
    d = cfg.data
    written = []
    for i in range(d.count):
        img, lab = generate_phantom(_phantom_spec(d.dims, d.noise, d.seed + i))
        name = f"case_{i:03d}"
        write_volume(out / f"{name}{IMAGE_SUFFIX}", img[0])
        write_volume(out / f"{name}{LABEL_SUFFIX}", lab.astype(np.uint8))
        written += [f"{name}{s}{e}" for s in (IMAGE_SUFFIX, LABEL_SUFFIX) for e in (".json", ".raw")]
    write_manifest(out, "phantom", cfg, d.seed, written)
    print(f"wrote {d.count} phantom case(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    images = _cases(Path(args.data), IMAGE_SUFFIX)
    labels = _cases(Path(args.data), LABEL_SUFFIX)
    missing = sorted(set(images) - set(labels))
    if missing:
        raise FileNotFoundError(f"no label volume for case(s): {', '.join(missing)}")
    data = [(read_volume(images[k])[0], read_volume(labels[k])[0, 0]) for k in images]
    out = _out_dir(args.out)
    model = MHMambaNet(cfg.network)
    log = out / "loss_log.csv"
    with log.open("w") as fh:
        def on_epoch(row):
            fh.write(row + "\n")
            fh.flush()
            if not args.quiet:
                print(row, flush=True)

        fh.write(LOG_HEADER + "\n")
        train(model, data, cfg.train, on_epoch=on_epoch)
    save_checkpoint(out / "model.ckpt", model.state_dict())
    (out / "config.txt").write_text(cfg.to_text())
    write_manifest(out, "train", cfg, cfg.train.seed, ["model.ckpt", "loss_log.csv", "config.txt"],
                   {"data": sorted(images)})
    return EXIT_OK


def _model_config(args) -> config_mod.RunConfig:
    # a training run's config.txt beside the checkpoint supplies the architecture
    if args.config is None:
        beside = Path(args.model).parent / "config.txt"
        if beside.is_file():
            args.config = str(beside)
    return resolve_config(args)


def cmd_infer(args) -> int:
    cfg = _model_config(args)
    model = MHMambaNet(cfg.network)
    model.load_state_dict(load_checkpoint(args.model))
    src = Path(args.input)
    inputs = _cases(src, IMAGE_SUFFIX) if src.is_dir() else {src.name.removesuffix(IMAGE_SUFFIX): src}
    out = _out_dir(args.out)
    written = []
    for name, path in inputs.items():
        vol = read_volume(path)
        spacing = read_header(path).get("spacing", [1.0, 1.0, 1.0])
        pred = sliding_window_infer(model, vol, cfg.infer.patch, cfg.infer.overlap)
        write_volume(out / f"{name}{PRED_SUFFIX}", pred.astype(np.uint8), spacing=spacing)
        written += [f"{name}{PRED_SUFFIX}.json", f"{name}{PRED_SUFFIX}.raw"]
        print(f"{name}: {out / (name + PRED_SUFFIX)}")
    write_manifest(out, "infer", cfg, cfg.network.seed, written, {"model": str(args.model)})
    return EXIT_OK


def _pairs(pred: Path, gt: Path):
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be directories or both be volumes")
    if not pred.is_dir():
        return [("case", pred, gt)]
    preds, gts = _cases(pred, PRED_SUFFIX), _cases(gt, LABEL_SUFFIX)
    missing = sorted(set(preds) - set(gts))
    if missing:
        raise FileNotFoundError(f"no ground truth for case(s): {', '.join(missing)}")
    return [(k, preds[k], gts[k]) for k in preds]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    reports = []
    for _, p, g in _pairs(Path(args.pred), Path(args.gt)):
        pred, gt = read_volume(p)[0, 0], read_volume(g)[0, 0]
        spacing = tuple(read_header(g).get("spacing", (1.0, 1.0, 1.0)))
        reports.append(evaluate(pred, gt, spacing))
    report = reports[0] if len(reports) == 1 else average_reports(reports)
    text = report.to_csv()
    print(text, end="" if text.endswith("\n") else "\n")
    if args.out:
        out = _out_dir(args.out)
        (out / "report.csv").write_text(text if text.endswith("\n") else text + "\n")
        write_manifest(out, "eval", cfg, args.seed, ["report.csv"],
                       {"pred": str(args.pred), "gt": str(args.gt)})
    return EXIT_OK


def _expand_scopes(names) -> list[str]:
    from .gradcheck import OPS, SCOPES
    scopes = []
    for n in names:
        if n == "all":
            scopes += list(SCOPES)
        elif n == "ops":
            scopes += list(OPS)
        elif n in SCOPES:
            scopes.append(n)
        else:
            raise UsageError(f"unknown gradcheck scope {n!r}; choose from all, ops, {', '.join(sorted(SCOPES))}")
    return list(dict.fromkeys(scopes))


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_scope
    scopes = _expand_scopes(args.scope)
    seed = args.seed if args.seed is not None else 0
    rows = ["scope,size,max_rel_err,status"]
    failed = False
    print(rows[0], flush=True)
    for s in scopes:
        err = run_scope(s, args.size, seed)
        ok = err < TOLERANCE
        failed |= not ok
        rows.append(f"{s},{args.size if args.size is not None else 'default'},{err:.3e},{'pass' if ok else 'FAIL'}")
        print(rows[-1], flush=True)
    if args.out:
        out = _out_dir(args.out)
        (out / "gradcheck.csv").write_text("\n".join(rows) + "\n")
        write_manifest(out, "gradcheck", None, seed, ["gradcheck.csv"],
                       {"scope": scopes, "size": args.size})
    return EXIT_NUMERIC if failed else EXIT_OK


# bench -------------------------------------------------------------------------------------


def _bench_scan(n: int, rng):
    from .ssm import SSMHeadParams, scan_blocked
    p = SSMHeadParams.init(12, 16, rng, np.float32)
    x = rng.standard_normal((1, n, 12)).astype(np.float32)
    return n, lambda: scan_blocked(x, p)


def _bench_block(n: int, rng):
    from .blocks import MHMBlock
    blk = MHMBlock(48, 4, 16, 4, rng, np.float32)
    x = ad.Tensor(rng.standard_normal((1, 48, n, n, n)).astype(np.float32))
    return n ** 3, lambda: blk(x)


def _bench_network(n: int, rng, cfg=None):
    # the encoder is the part whose cost the token count drives
    from dataclasses import replace
    net_cfg = replace(cfg.network if cfg else config_mod.RunConfig().network, patch=(n, n, n))
    net = MHMambaNet(net_cfg)
    x = ad.Tensor(rng.standard_normal((1, net_cfg.in_channels, n, n, n)).astype(net_cfg.dtype))
    return n ** 3, lambda: net.encode(x)


BENCHES = {"scan": _bench_scan, "block": _bench_block, "network": _bench_network}


def bench_rows(component: str, sizes, repeat: int = 3, seed: int = 0) -> list[tuple[int, int, float]]:
    """(size, tokens, best wall-ms over ``repeat`` runs) per size."""
    rows = []
    for n in sizes:
        tokens, fn = BENCHES[component](n, np.random.default_rng(seed))
        best = float("inf")
        with ad.no_grad():
            fn()  # warm-up
            for _ in range(repeat):
                t0 = time.perf_counter()
                fn()
                best = min(best, (time.perf_counter() - t0) * 1e3)
        rows.append((n, tokens, best))
    return rows


def format_bench(rows) -> list[str]:
    out = ["size,tokens,wall_ms,ratio"]
    prev = None
    for n, tokens, ms in rows:
        ratio = "" if prev is None else f"{ms / prev:.3f}"
        out.append(f"{n},{tokens},{ms:.3f},{ratio}")
        prev = ms
    return out


def cmd_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs at least one positive integer")
    seed = args.seed if args.seed is not None else 0
    lines = format_bench(bench_rows(args.component, sizes, args.repeat, seed))
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args.out)
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        write_manifest(out, "bench", None, seed, ["bench.csv"],
                       {"component": args.component, "sizes": sizes, "repeat": args.repeat})
    return EXIT_OK


# parser ------------------------------------------------------------------------------------

DEFAULT_BENCH_SIZES = {"scan": "4096,8192,16384", "block": "8,16", "network": "32,64"}


def build_parser() -> argparse.ArgumentParser:
    # shared flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subparser from clobbering a value given before it
    def shared(top):
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--seed", type=int, default=None if top else argparse.SUPPRESS,
                       help="seed for network init, training and phantoms (overrides config)")
        p.add_argument("--deterministic", action="store_true", default=False if top else argparse.SUPPRESS,
                       help="single-threaded BLAS for byte-reproducible runs")
        return p

    parser = argparse.ArgumentParser(prog="mhmamba", description=__doc__.splitlines()[0],
                                     parents=[shared(True)])
    parser.add_argument("--version", action="version", version=f"mhmamba {version_tag()}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = shared(False)

    def configurable(p):
        p.add_argument("--config", help="flat section.key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, wins over the file (repeatable)")

    p = sub.add_parser("phantom", parents=[common], help="write synthetic phantom cases")
    configurable(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[common], help="train on a directory of cases")
    configurable(p)
    p.add_argument("--data", required=True, help="directory with *_image / *_label volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true", help="do not echo log rows")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="sliding-window inference")
    configurable(p)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="an image volume or a directory of *_image volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="Dice / HD95 per region")
    configurable(p)
    p.add_argument("--pred", required=True, help="label volume or directory of *_pred volumes")
    p.add_argument("--gt", required=True, help="label volume or directory of *_label volumes")
    p.add_argument("--out", help="directory for report.csv and the manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("scope", nargs="+", help="op name, block, agf, network, 'ops' or 'all'")
    p.add_argument("--size", type=int, help="spatial size (default depends on scope)")
    p.add_argument("--out", help="directory for gradcheck.csv and the manifest")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="wall-clock scaling table")
    p.add_argument("component", choices=sorted(BENCHES))
    p.add_argument("--sizes", help="comma-separated sizes: tokens for scan, cube side otherwise")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", help="directory for bench.csv and the manifest")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    if getattr(args, "sizes", "") is None:
        args.sizes = DEFAULT_BENCH_SIZES[args.component]
    for name in ("config", "set"):
        if not hasattr(args, name):
            setattr(args, name, None)
    limit = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
    try:
        with limit:
            return args.func(args)
    except (UsageError, config_mod.ConfigParseError) as e:
        print(f"mhmamba {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, VolumeFormatError, CheckpointError) as e:
        print(f"mhmamba {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"mhmamba {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # shape/config mismatches surfaced by the library
        print(f"mhmamba {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
