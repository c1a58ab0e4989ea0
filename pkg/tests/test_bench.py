import numpy as np
import pytest

from tensorstash import bench


def test_codec_rows_and_invariance():
    rows = bench.bench_codec(1 << 20, (1, 3), chunk_elements=1 << 16)
    assert [r["operation"] for r in rows] == ["tensorx_encode", "tensorx_decode"] * 2 + ["fmpp_encode", "fmpp_decode"] * 2
    assert all(r["bytes"] == 1 << 20 and r["seconds"] > 0 for r in rows)


def test_sketch_rows():
    (row,) = bench.bench_sketch(1 << 18)
    assert row["operation"] == "sketch" and row["MB/s"] > 0


def test_planner_assigns_variants_as_deltas():
    rng = np.random.default_rng(0)
    planner, index, roots = bench.planner_setup(20, rng, approximate=False)
    assert len(index) == 20
    bench.time_assign(planner, roots, rng, 10)
    planner.check()
    deltas = sum(len(cl.assignments) for cl in planner.clusters.values())
    assert deltas == 10


def test_csv_and_unknown_suite():
    text = bench.to_csv([bench._row("x", 10, 0.5, 2)])
    assert text.splitlines() == ["operation,bytes,seconds,MB/s,workers", "x,10,0.500000,0.00,2"]
    with pytest.raises(ValueError):
        bench.run_suite("")
