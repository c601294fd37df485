"""Command-line entry point: ``mdtlab {gen,train,battery,report,validate}``.

Exit codes: 0 success, 1 invalid manifest or data, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import pipeline
from .data import DatasetError
from .kernels import BACKEND

log = logging.getLogger("mdtlab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdtlab", description="Two-stage decision task experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest_required=True):
        sp.add_argument("--manifest", required=manifest_required, help="experiment manifest (JSON)")
        sp.add_argument("--out", help="output directory (overrides the manifest)")
        sp.add_argument("--jobs", type=int, help="worker processes (overrides the manifest)")
        sp.add_argument("--desk-scale", action="store_true",
                        help="8 subjects, short training, small LSTM; for a single machine")

    common(sub.add_parser("gen", help="generate the synthetic subject corpus"))
    tr = sub.add_parser("train", help="train every model in the manifest")
    common(tr)
    tr.add_argument("--resume", action="store_true", help="keep bundles that already exist and verify")
    common(sub.add_parser("battery", help="frozen evaluation on the task suite and analysis tables"))
    rp = sub.add_parser("report", help="figure tables from a finished battery")
    common(rp, manifest_required=False)
    common(sub.add_parser("validate", help="check the manifest and the subject data"))
    return p


def _manifest(args) -> pipeline.Manifest:
    m = pipeline.Manifest.load(args.manifest)
    return m.resolved(desk_scale=args.desk_scale, out=args.out, jobs=args.jobs)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        if args.command == "report":
            if args.manifest:
                out = _manifest(args).out
            elif args.out:
                out = args.out
            else:
                raise pipeline.ManifestError("report needs --out or --manifest")
            result = pipeline.cmd_report(out)
        else:
            m = _manifest(args)
            if args.command == "validate":
                problems = pipeline.cmd_validate(m)
                for line in problems:
                    print(line)
                if problems:
                    return EXIT_INVALID
                result = {"manifest": "ok", "out": m.out}
            else:
                pipeline.write_manifest_echo(m)
                log.info("kernel backend: %s", BACKEND)
                if args.command == "gen":
                    result = pipeline.cmd_gen(m)
                elif args.command == "train":
                    cells = pipeline.cmd_train(m, resume=args.resume)
                    result = {"bundles": len(cells),
                              "trained": sum(c["status"] == "trained" for c in cells),
                              "kept": sum(c["status"] == "kept" for c in cells)}
                else:
                    result = pipeline.cmd_battery(m)
    except (pipeline.ManifestError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
