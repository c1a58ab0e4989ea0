"""``th`` command line.

Exit codes: 0 success, 2 usage, 3 not found, 4 integrity failure, 5 ingest
failure. Reports go to stdout as JSON (NDJSON for streams, CSV for bench)
unless ``--human`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as _bench
from .config import ENV_CONFIG, ConfigError, EngineConfig, parse_config, resolve_store_path
from .predictor import (
    RankDeficientError,
    error_report,
    fit,
    predict_ratio,
    read_pairs_csv,
    write_pairs_csv,
)
from .store import IngestError, IntegrityError, NotFoundError, Store, StoreError
from .tensor_format import FormatError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_INTEGRITY = 4
EXIT_INGEST = 5


class UsageError(Exception):
    pass


def _emit(args, obj, human: str | None = None) -> None:
    if args.human and human is not None:
        print(human)
    else:
        print(json.dumps(obj, sort_keys=True))


def _overrides(args) -> dict[str, str]:
    """Settings given explicitly via the config file or flags."""
    path = args.config or os.environ.get(ENV_CONFIG)
    values = {}
    if path:
        try:
            values = parse_config(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if getattr(args, "codec", None):
        values["codec"] = args.codec
    if args.workers:
        values["workers"] = str(args.workers)
    return values


def _config(args) -> EngineConfig:
    return EngineConfig.from_dict(_overrides(args))


def _open(args, *, readonly: bool = False) -> Store:
    overrides = _overrides(args)
    root = resolve_store_path(args.store, EngineConfig.from_dict(overrides))
    if not (root / "meta.db").exists():
        raise NotFoundError(f"no store at {root} (run `th init` first)")
    return Store.open(root, overrides, readonly=readonly)


def _model_id(path: str) -> str:
    name = Path(path).name
    return name[: -len(".safetensors")] if name.endswith(".safetensors") else Path(path).stem


# -- commands -------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = _config(args)
    if args.standalone:
        cfg = EngineConfig.from_dict({"standalone": "true"}, cfg)
    root = resolve_store_path(args.store, cfg)
    Store.init(root, cfg).close()
    _emit(args, {"store": str(root), "config": cfg.to_dict()}, f"initialized store at {root}")
    return EXIT_OK


def _ingest_items(args):
    if args.model_id and len(args.paths) != 1:
        raise UsageError("--model-id needs exactly one path")
    return [(args.model_id or _model_id(p), p) for p in args.paths]


def cmd_ingest(args) -> int:
    items = _ingest_items(args)
    with _open(args) as store:
        if args.dry_run:
            return _print_plans(args, store, items)

        def show(rep):
            _emit(
                args,
                {k: v for k, v in rep.to_json().items() if k != "tensors" or args.verbose},
                f"{rep.model_id}: model ratio {rep.model_ratio:.4f}  cumulative ratio {rep.cumulative_ratio:.4f}"
                + ("  (unchanged)" if rep.unchanged else ""),
            )

        _, failures = store.ingest_many(items, keep_going=args.keep_going, on_report=show)
        for model_id, message in failures:
            print(f"th: ingest failed for {model_id}: {message}", file=sys.stderr)
        return EXIT_INGEST if failures else EXIT_OK


def _print_plans(args, store: Store, items) -> int:
    status = EXIT_OK
    for model_id, path in items:
        try:
            plan = store.plan_model(path)
        except (FormatError, OSError) as exc:
            print(f"th: cannot plan {model_id}: {exc}", file=sys.stderr)
            status = EXIT_INGEST
            continue
        for action in plan:
            rec = dict(action.to_json(), model_id=model_id)
            print(json.dumps(rec, separators=(",", ":")))
    return status


def cmd_plan(args) -> int:
    items = _ingest_items(args)
    with _open(args, readonly=True) as store:
        return _print_plans(args, store, items)


def cmd_get(args) -> int:
    with _open(args, readonly=True) as store:
        data = store.retrieve_model(args.model_id, verify=args.verify)
    out = args.out or f"{args.model_id}.safetensors"
    if out == "-":
        sys.stdout.buffer.write(data)
        return EXIT_OK
    Path(out).write_bytes(data)
    _emit(args, {"model_id": args.model_id, "out": out, "bytes": len(data), "verified": args.verify},
          f"wrote {out} ({len(data)} bytes)")
    return EXIT_OK


def cmd_refine(args) -> int:
    with _open(args) as store:
        rep = store.refine(force=args.force)
    _emit(args, rep.to_json(),
          f"{len(rep.clusters)} clusters touched, {rep.splits} promotions, "
          f"stored {rep.stored_before} -> {rep.stored_after} bytes")
    return EXIT_OK


def cmd_verify(args) -> int:
    with _open(args, readonly=True) as store:
        failures = store.verify(args.model_id)
    _emit(args, {"ok": not failures, "failures": failures},
          "ok" if not failures else "\n".join(f"{f['tensor_id']}: {f['error']}" for f in failures))
    return EXIT_INTEGRITY if failures else EXIT_OK


def cmd_stats(args) -> int:
    with _open(args, readonly=True) as store:
        st = store.stats()
    human = (
        f"models {st['models']}  tensors {st['tensor_records']} ({st['unique_tensors']} unique, "
        f"{st['dedup_count']} deduplicated)\nraw {st['raw_bytes']} B  stored {st['stored_bytes']} B  "
        f"reduction {st['global_ratio']:.4f}\nbases {st['bases']}  deltas {st['deltas']}  "
        f"clusters {len(st['clusters'])}  metadata overhead {st['metadata_overhead']:.6%}"
    )
    _emit(args, st, human)
    return EXIT_OK


def _holdout(pairs: list, codec: str, fraction: float, seed: int) -> dict:
    order = np.random.default_rng(seed).permutation(len(pairs))
    cut = int(round(len(pairs) * (1 - fraction)))
    train = [pairs[i] for i in order[:cut]]
    test = [pairs[i] for i in order[cut:]]
    if not test:
        return {}
    coeffs = fit(train, codec)
    pred = predict_ratio(np.array([p.p_hat for p in test]), coeffs)
    return error_report(pred, [p.measured_ratio for p in test])


def cmd_fit(args) -> int:
    from .synth import training_corpus

    if bool(args.pairs) == bool(args.synthesize):
        raise UsageError("give either a pairs CSV or --synthesize N")
    if args.pairs:
        try:
            pairs = read_pairs_csv(args.pairs)
        except FileNotFoundError:
            raise NotFoundError(f"{args.pairs}: no such file") from None
        except (ValueError, KeyError) as exc:
            raise UsageError(str(exc)) from None
    else:
        pairs = training_corpus(args.synthesize, np.random.default_rng(args.seed), args.codec)
    if args.write_pairs:
        write_pairs_csv(args.write_pairs, pairs)
    try:
        report = _holdout(pairs, args.codec, args.holdout, args.seed) if args.holdout > 0 else {}
        coeffs = fit(pairs, args.codec)
    except RankDeficientError as exc:
        raise UsageError(f"degenerate corpus: {exc}") from None
    if args.save:
        with _open(args) as store:
            store.save_coefficients(coeffs)
    out = {"record": coeffs.to_record(), "pairs": len(pairs), "holdout": report}
    human = coeffs.to_record()
    if report:
        human += (f"\nholdout n={report['n']}  r={report['pearson_r']:.4f}  "
                  f"P50={report['p50'] * 100:.2f}pp  P90={report['p90'] * 100:.2f}pp  P99={report['p99'] * 100:.2f}pp")
    _emit(args, out, human)
    return EXIT_OK


def cmd_bench(args) -> int:
    if not args.suite or args.suite not in _bench.SUITES:
        raise UsageError(f"bench suite must be one of {', '.join(_bench.SUITES)}")
    workers = [int(w) for w in args.bench_workers.split(",")] if args.bench_workers else [1, 8]
    size = int(args.size_mib * (1 << 20)) if args.size_mib else None
    rows = _bench.run_suite(args.suite, size_bytes=size, workers=workers, seed=args.seed)
    if args.human:
        for r in rows:
            print(f"{r['operation']:<18} {r['bytes']:>12} B  {r['seconds']:.4f} s  {r['MB/s']:>9.1f} MB/s  "
                  f"workers={r['workers']}")
    else:
        sys.stdout.write(_bench.to_csv(rows))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", help="store directory (default: $TH_STORE or ~/.tensorstash)")
    common.add_argument("--config", help="key=value config file (default: $TH_CONFIG)")
    common.add_argument("--human", action="store_true", help="human-readable output instead of JSON/CSV")
    common.add_argument("--workers", type=int, help="worker threads for codec and sketch work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="th", description="Delta-compressing tensor store.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="create a store")
    s.add_argument("--codec", choices=["TENSORX", "FMPP"])
    s.add_argument("--standalone", action="store_true", help="no deltas: compress every tensor on its own")
    s.set_defaults(func=cmd_init)

    for name, func, helptext in (("ingest", cmd_ingest, "ingest model files in order"),
                                 ("plan", cmd_plan, "print the plan ingesting would produce")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("paths", nargs="+")
        s.add_argument("--model-id")
        s.add_argument("--dry-run", action="store_true", help="print plan actions as NDJSON, write nothing")
        if name == "ingest":
            s.add_argument("--keep-going", action="store_true", help="continue after a failed model")
        s.set_defaults(func=func)

    s = sub.add_parser("get", parents=[common], help="reconstruct a model file")
    s.add_argument("model_id")
    s.add_argument("--out", help="output path, '-' for stdout (default: <model_id>.safetensors)")
    s.add_argument("--verify", action="store_true", help="re-digest every tensor against its id")
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("refine", parents=[common], help="run cluster splitting")
    s.add_argument("--force", action="store_true", help="consider every cluster, not only triggered ones")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("fit", parents=[common], help="fit ratio-predictor coefficients")
    s.add_argument("pairs", nargs="?", help="CSV with p_hat,measured_ratio[,bytes] columns")
    s.add_argument("--synthesize", type=int, metavar="N", help="generate N pairs from synthetic families")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--codec", choices=["TENSORX", "FMPP"], default="TENSORX")
    s.add_argument("--holdout", type=float, default=0.2, help="fraction held out for the error report")
    s.add_argument("--write-pairs", metavar="CSV", help="also write the pairs used")
    s.add_argument("--save", action="store_true", help="store the coefficients in the store")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("verify", parents=[common], help="decode and re-digest stored tensors")
    s.add_argument("model_id", nargs="?")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("stats", parents=[common], help="corpus statistics")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("bench", parents=[common], help="micro-benchmarks (CSV)")
    s.add_argument("suite", nargs="?", default="", help=", ".join(_bench.SUITES))
    s.add_argument("--size-mib", type=float)
    s.add_argument("--bench-workers", help="comma-separated worker counts (default 1,8)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="th: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"th: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotFoundError as exc:
        print(f"th: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except IntegrityError as exc:
        print(f"th: integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except IngestError as exc:
        print(f"th: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except StoreError as exc:
        print(f"th: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
