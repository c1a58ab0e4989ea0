"""Micro-benchmarks over synthetic tensors.

Each suite returns rows with the columns ``operation, bytes, seconds,
MB/s, workers``. Timings are wall-clock; the byte counts and outputs are
deterministic for a given seed.
"""

from __future__ import annotations

import csv
import io
import time
from typing import Iterable

import numpy as np

from . import codec as _codec
from . import synth
from .codec import CodecId
from .fingerprint import SketchParams, sketch
from .index import SketchIndex
from .planner import CompatKey, Planner, PlannerConfig, TensorInfo
from .tensor_format import DType

COLUMNS = ("operation", "bytes", "seconds", "MB/s", "workers")
SUITES = ("codec", "sketch", "planner")


def _row(operation: str, nbytes: int, seconds: float, workers: int) -> dict:
    rate = nbytes / seconds / 1e6 if seconds > 0 else float("inf")
    return {"operation": operation, "bytes": nbytes, "seconds": seconds, "MB/s": rate, "workers": workers}


def codec_pair(nbytes: int, rng: np.random.Generator, dtype: DType = DType.BF16, noise: float = 0.01):
    """A base tensor and a fine-tuned variant of roughly ``nbytes`` each."""
    n = max(1, nbytes // dtype.itemsize)
    base = synth.base_weights(n, rng, dtype)
    return base, synth.finetune(base, dtype, rng, noise)


def bench_codec(nbytes: int = 64 << 20, workers: Iterable[int] = (1, 8), *, codecs=("TENSORX", "FMPP"),
                seed: int = 0, repeat: int = 1, chunk_elements: int = _codec.DEFAULT_CHUNK_ELEMENTS) -> list[dict]:
    rng = np.random.default_rng(seed)
    base, target = codec_pair(nbytes, rng)
    raw = target.nbytes
    rows = []
    for name in codecs:
        cid = CodecId[name]
        reference = None
        for w in workers:
            best_enc = best_dec = float("inf")
            for _ in range(repeat):
                t0 = time.perf_counter()
                blob = _codec.encode(cid, target, base, DType.BF16, chunk_elements, workers=w)
                t1 = time.perf_counter()
                out = _codec.decode(blob, base, workers=w)
                t2 = time.perf_counter()
                best_enc, best_dec = min(best_enc, t1 - t0), min(best_dec, t2 - t1)
            data = blob.to_bytes()
            if reference is None:
                reference = data
            elif data != reference:
                raise AssertionError(f"{name} output differs between worker counts")
            if out != target.tobytes():
                raise AssertionError(f"{name} round trip is not lossless")
            rows.append(_row(f"{name.lower()}_encode", raw, best_enc, w))
            rows.append(_row(f"{name.lower()}_decode", raw, best_dec, w))
    return rows


def bench_sketch(nbytes: int = 32 << 20, workers: Iterable[int] = (1,), *, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    words = synth.base_weights(max(1, nbytes // 2), rng)
    view = synth.view("w", words, DType.BF16)
    sketch(synth.view("warm", words[:1024], DType.BF16))
    rows = []
    for w in workers:
        t0 = time.perf_counter()
        sketch(view, workers=w)
        rows.append(_row("sketch", view.nbytes, time.perf_counter() - t0, w))
    return rows


def planner_setup(bases: int, rng: np.random.Generator, *, n: int = 4096, approximate: bool | None = True,
                  params: SketchParams | None = None):
    """A planner holding ``bases`` unrelated base tensors of one CompatKey, backed by an index."""
    params = params or SketchParams()
    compat = CompatKey("BF16", (n,))
    index = SketchIndex(params, approximate=approximate)
    planner = Planner(PlannerConfig(), query=index.query_candidates)
    roots = []
    for i in range(bases):
        words = synth.base_weights(n, rng)
        sk = sketch(synth.view("w", words, DType.BF16), params)
        digest = i.to_bytes(16, "big")
        planner.restore(TensorInfo(digest, "w", compat, words.nbytes, sk), i)
        index.add(digest, compat, sk)
        roots.append(words)
    planner.seen_names.add(("w", (n,)))
    return planner, index, roots


def time_assign(planner: Planner, roots, rng: np.random.Generator, count: int, *, n: int = 4096,
                params: SketchParams | None = None) -> float:
    """Mean seconds per ``assign`` for fine-tuned variants of random bases (sketching excluded)."""
    params = params or SketchParams()
    compat = CompatKey("BF16", (n,))
    infos = []
    for j in range(count):
        words = synth.finetune(roots[int(rng.integers(len(roots)))], DType.BF16, rng, 0.01)
        sk = sketch(synth.view("w", words, DType.BF16), params)
        infos.append(TensorInfo((1 << 100 | j).to_bytes(16, "big"), "w", compat, words.nbytes, sk))
    # warm the graph build outside the timed region
    planner.candidates(infos[0])
    t0 = time.perf_counter()
    for info in infos:
        planner.assign(info)
    return (time.perf_counter() - t0) / count


def bench_planner(sizes: Iterable[int] = (100, 200, 400, 800), *, per_size: int = 200, seed: int = 0) -> list[dict]:
    rows = []
    for size in sizes:
        rng = np.random.default_rng(seed + size)
        planner, _, roots = planner_setup(size, rng)
        per_tensor = time_assign(planner, roots, rng, per_size)
        rows.append({"operation": f"assign_n{size}", "bytes": 0, "seconds": per_tensor, "MB/s": 0.0, "workers": 1})
    return rows


def run_suite(suite: str, *, size_bytes: int | None = None, workers: Iterable[int] = (1, 8), seed: int = 0) -> list[dict]:
    if suite == "codec":
        return bench_codec(size_bytes or 64 << 20, workers, seed=seed)
    if suite == "sketch":
        return bench_sketch(size_bytes or 32 << 20, workers, seed=seed)
    if suite == "planner":
        return bench_planner(seed=seed)
    raise ValueError(f"unknown bench suite {suite!r} (choose from {', '.join(SUITES)})")


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "seconds": f"{r['seconds']:.6f}", "MB/s": f"{r['MB/s']:.2f}"})
    return buf.getvalue()
