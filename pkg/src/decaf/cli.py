"""``decaf`` command-line interface.

Exit codes: 0 ok, 2 configuration error, 3 I/O error (missing or malformed
files), 4 numerical divergence, 5 dimension mismatch between inputs.
``DECAF_THREADS`` caps BLAS and FFT worker threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_SHAPE = 0, 2, 3, 4, 5

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def thread_limit() -> int | None:
    raw = os.environ.get("DECAF_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DECAF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"DECAF_THREADS must be a positive integer, got {raw!r}")
    return n


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="decaf", description="Neural-field intensity diffraction tomography.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config entry, e.g. --set loss.alpha=0.1")
        return p

    p = cmd("simulate", "synthesize a phantom and its measurements")
    p.add_argument("--spec", help="phantom JSON (replaces the config's phantom section)")
    p.add_argument("--setup", help="illumination preset")
    p.add_argument("--noise", type=float, help="gaussian noise std")
    p.add_argument("--out", required=True, help="output directory")

    p = cmd("reconstruct", "train a neural field")
    p.add_argument("--measurements", help="DCAM file (default: simulate from the config)")
    p.add_argument("--out", required=True, help="output directory")

    p = cmd("tikhonov", "closed-form Tikhonov baseline")
    p.add_argument("--measurements")
    p.add_argument("--tau", type=float, help="fixed tau (default: best over the config sweep)")
    p.add_argument("--out", required=True, help="output DCAF path or directory")

    p = cmd("render", "render stored weights on a grid")
    p.add_argument("--weights", required=True)
    p.add_argument("--upsample", default="1x1x1", help="refinement per axis, e.g. 2x2x4")
    p.add_argument("--out", required=True, help="output DCAF path")
    p.add_argument("--export", choices=("png", "csv"), help="also export the middle z slice")

    p = cmd("evaluate", "metrics of an estimate against a reference", config=False)
    p.add_argument("--reference", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--n0", type=float, default=1.0)
    p.add_argument("--out", help="metrics JSON path")

    p = cmd("ablate", "train the four regularization variants")
    p.add_argument("--measurements")
    p.add_argument("--out", required=True)

    p = cmd("denoiser-train", "train a DnCNN-lite denoiser", config=False)
    p.add_argument("--sigma", type=float, required=True, help="noise level on the 0-255 scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", required=True)

    p = cmd("export", "export a volume slice or line profile", config=False)
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", choices=("z", "x", "y"), default="z")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--part", choices=("re", "im"), default="re")
    p.add_argument("--format", choices=("png", "csv"), default="png")
    p.add_argument("--profile", nargs=4, type=float, metavar=("R0", "C0", "R1", "C1"),
                   help="write a line profile CSV between two pixel positions instead")
    p.add_argument("--out", required=True)
    return ap


def _config(args):
    from . import config

    cfg = config.load(args.config) if args.config else config.RunConfig()
    return config.apply_overrides(cfg, args.set) if args.set else cfg


def _run(args) -> dict:
    from pathlib import Path

    from . import config, export, fileio, pipeline

    if args.command == "simulate":
        cfg = _config(args)
        extra = []
        if args.setup:
            extra.append(f"setup.preset={args.setup}")
        if args.noise is not None:
            extra += ["noise.kind=gaussian" if args.noise > 0 else "noise.kind=none", f"noise.std={args.noise}"]
        if args.spec:
            spec = json.loads(Path(args.spec).read_text())
            data = cfg.model_dump()
            data["phantom"] = spec
            cfg = config.parse(data)
        cfg = config.apply_overrides(cfg, extra) if extra else cfg
        return pipeline.simulate(cfg, args.out)
    if args.command == "reconstruct":
        return pipeline.reconstruct(_config(args), args.out, args.measurements)
    if args.command == "tikhonov":
        out = Path(args.out)
        res = pipeline.tikhonov(_config(args), out.parent if out.suffix else out, args.tau, args.measurements)
        if out.suffix and Path(res["volume"]) != out:
            Path(res["volume"]).replace(out)
            res["volume"] = str(out)
        return res
    if args.command == "render":
        cfg = _config(args)
        res = pipeline.render(args.weights, cfg.grid.build(), args.out, pipeline.parse_upsample(args.upsample))
        if args.export:
            vol = fileio.read_volume(args.out)
            mid = vol.grid.nz // 2
            res["export"] = str(export.export_slice(vol, "z", mid, args.export,
                                                    Path(args.out).with_suffix(f".z{mid}.{args.export}")))
        return res
    if args.command == "evaluate":
        res = pipeline.evaluate(args.reference, args.estimate, args.n0, args.out)
        if res.get("identical_inputs"):
            print("identical inputs: PSNR is unbounded", file=sys.stderr)
        return res
    if args.command == "ablate":
        table = pipeline.ablate(_config(args), args.out, measurements=args.measurements)
        print(pipeline.format_table(table), end="")
        return {"table": str(Path(args.out) / "ablation.json")}
    if args.command == "denoiser-train":
        return pipeline.denoiser_train(args.sigma, args.seed, args.out, count=args.count, epochs=args.epochs)
    if args.command == "export":
        vol = fileio.read_volume(args.volume)
        if args.profile:
            img = export.take_slice(vol, args.axis, args.index, args.part)
            r0, c0, r1, c1 = args.profile
            return {"profile": str(export.export_profile(args.out, img, (r0, c0), (r1, c1)))}
        return {"slice": str(export.export_slice(vol, args.axis, args.index, args.format, args.out, args.part))}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = thread_limit()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if threads is not None:
        # must precede the first numpy import to reach the BLAS pool
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)

    import scipy.fft

    from .config import ConfigError
    from .pipeline import ShapeMismatchError
    from .train import DivergenceError

    try:
        with scipy.fft.set_workers(threads or 1):
            result = _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeMismatchError as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
