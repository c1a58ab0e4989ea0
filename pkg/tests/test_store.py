import json
import os
import signal
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from conftest import family, make_model
from tensorstash import synth
from tensorstash.codec import CodecId
from tensorstash.config import EngineConfig
from tensorstash.fingerprint import tensor_digest
from tensorstash.store import IngestError, IntegrityError, NotFoundError, Store, StoreError, open_or_init
from tensorstash.tensor_format import DType, parse_model


def _payloads(data: bytes) -> dict:
    return {v.name: tensor_digest(v.data) for v in parse_model(data)}


def _audit(store):
    assert store.stats()["stored_bytes"] == store.disk_blob_bytes()
    assert not store.verify()


def test_empty_store_stats(store):
    s = store.stats()
    assert s["raw_bytes"] == s["stored_bytes"] == s["models"] == 0
    assert s["global_ratio"] == 0.0 and s["clusters"] == []


def test_layout_on_disk(store, rng):
    (mid, data), *_ = family(rng, variants=0)
    store.ingest_model(mid, data)
    root = store.root
    assert (root / "meta.db").is_file()
    digest = tensor_digest(parse_model(data)[0].data).hex()
    assert (root / "blobs" / digest[:2] / digest[2:4] / f"{digest}.thdx").is_file()
    assert (root / "sketches" / f"{digest}.thsk").is_file()


def test_round_trip_and_audit(store, rng):
    models = family(rng, variants=4)
    for mid, data in models:
        rep = store.ingest_model(mid, data)
        assert rep.raw_bytes == sum(v.nbytes for v in parse_model(data))
    for mid, data in models:
        assert _payloads(store.retrieve_model(mid)) == _payloads(data)
    _audit(store)
    assert store.model_ids() == [m for m, _ in models]


def test_retrieve_canonical_header(store, rng):
    views = [synth.view(n, synth.base_weights(64, rng), DType.BF16) for n in ("z", "a")]
    from tensorstash.tensor_format import write_model

    store.ingest_model("m", write_model(views, {"k": "v"}))
    out, md = parse_model(store.retrieve_model("m"), with_metadata=True)
    assert [v.name for v in out] == ["a", "z"] and md == {"k": "v"}


def test_reingest_adds_no_bytes(store, rng):
    models = family(rng, variants=2)
    for mid, data in models:
        store.ingest_model(mid, data)
    before = store.disk_blob_bytes()
    rep = store.ingest_model(models[1][0], models[1][1])
    assert rep.unchanged and rep.new_stored_bytes == 0
    for i, (_, data) in enumerate(models):
        rep = store.ingest_model(f"copy{i}", data)
        assert rep.new_stored_bytes == 0
    assert store.disk_blob_bytes() == before
    s = store.stats()
    assert s["dedup_count"] == s["tensor_records"] - s["unique_tensors"] > 0


def test_same_id_new_content_rejected(store, rng):
    a, b = family(rng, variants=1)
    store.ingest_model("m", a[1])
    with pytest.raises(IngestError, match="different content"):
        store.ingest_model("m", b[1])


def test_corrupt_file_leaves_no_trace(store, rng, tmp_path):
    (mid, data), *_ = family(rng, variants=0)
    store.ingest_model(mid, data)
    before = (store.stats(), store.disk_blob_bytes(), sorted(p.name for p in (store.root / "sketches").iterdir()))
    good = family(rng, variants=0)[0][1]
    bad = good[:-100]
    with pytest.raises(IngestError):
        store.ingest_model("broken", bad)
    with pytest.raises(IngestError):
        store.ingest_model("missing", tmp_path / "nope.safetensors")
    after = (store.stats(), store.disk_blob_bytes(), sorted(p.name for p in (store.root / "sketches").iterdir()))
    assert before == after
    assert not store.has_model("broken")


def test_failure_midway_rolls_back(store, rng, monkeypatch):
    (_, data), *_ = family(rng, variants=0)
    calls = {"n": 0}
    real = store._put

    def flaky(journal, digest, blob, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        return real(journal, digest, blob, **kw)

    monkeypatch.setattr(store, "_put", flaky)
    with pytest.raises(IngestError, match="disk full"):
        store.ingest_model("m", data)
    assert store.disk_blob_bytes() == 0 and store.stats()["models"] == 0
    monkeypatch.undo()
    store.ingest_model("m", data)
    _audit(store)


def test_unknown_model(store):
    with pytest.raises(NotFoundError):
        store.retrieve_model("ghost")
    with pytest.raises(NotFoundError):
        Store.open(store.root / "elsewhere")


def test_one_base_read_per_distinct_base(tmp_path, rng):
    store = Store.init(tmp_path / "s", EngineConfig(workers=1))
    models = family(rng, variants=3, noise=0.002)
    for mid, data in models:
        store.ingest_model(mid, data)
    store.close()
    store = Store.open(tmp_path / "s")
    records = store.records("ft2")
    deltas = [d for _, d, _, _ in records if store.planner.base_of(d) is not None]
    assert deltas, "variants should be stored as deltas"
    bases = {store.planner.base_of(d) for d in deltas}
    store.blob_reads = 0
    store.retrieve_model("ft2")
    assert store.blob_reads == len(set(d for _, d, _, _ in records)) + len(bases)


def _two_families(rng):
    """Two unrelated families sharing tensor names and shapes, so both land in one cluster."""
    out = []
    for tag in ("a", "b"):
        out += [(f"{tag}-{mid}", data) for mid, data in family(rng, layers=1, variants=4, noise=0.003)]
    return out


def test_refine_splits_divergent_families(tmp_path, rng):
    store = Store.init(tmp_path / "s", EngineConfig(workers=1, chunk_elements=1 << 12))
    models = _two_families(rng)
    for mid, data in models:
        store.ingest_model(mid, data)
    assert len(store.planner.clusters) == 1
    before = store.stored_bytes()
    rep = store.refine()
    assert rep.splits >= 1
    assert rep.stored_after < before
    for c in rep.clusters:
        assert c["ratio_after"] > c["ratio_before"]
    # fixed point
    assert store.refine().splits == 0
    for mid, data in models:
        assert _payloads(store.retrieve_model(mid)) == _payloads(data)
    _audit(store)
    store.close()
    # persisted clustering survives reopen
    again = Store.open(tmp_path / "s")
    assert again.refine().splits == 0
    assert again.stored_bytes() == rep.stored_after


def test_tight_family_needs_no_split(store, rng):
    for mid, data in family(rng, layers=1, variants=8, noise=0.001):
        store.ingest_model(mid, data)
    assert store.refine().splits == 0


def test_ingest_many_refines_each_batch(tmp_path, rng):
    store = Store.init(tmp_path / "s", EngineConfig(workers=1))
    reports, failures = store.ingest_many(_two_families(rng))
    assert not failures and len(reports) == 10
    assert len(store.planner.clusters[min(store.planner.clusters)].bases) > 1


def test_ingest_many_keep_going(store, rng):
    good = family(rng, variants=1)
    items = [good[0], ("bad", b"garbage"), good[1]]
    reports, failures = store.ingest_many(items)
    assert [r.model_id for r in reports] == ["base"] and failures[0][0] == "bad"
    reports, failures = store.ingest_many(items, keep_going=True)
    assert [r.model_id for r in reports] == ["base", "ft0"]


def test_plan_model_writes_nothing(store, rng):
    models = family(rng, variants=1)
    store.ingest_model(*models[0])
    before = (store.stats(), store.disk_blob_bytes())
    plan = store.plan_model(models[1][1])
    assert len(plan) == 3
    assert before == (store.stats(), store.disk_blob_bytes())
    assert store.ingest_model(*models[1]).new_stored_bytes > 0


def test_tampered_blob_detected(store, rng):
    models = family(rng, variants=1)
    for mid, data in models:
        store.ingest_model(mid, data)
    digest = store.records("ft0")[0][1]
    path = store.blob_path(digest)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x55
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        store.retrieve_model("ft0")
    assert any(f["tensor_id"] == digest.hex() for f in store.verify())
    path.unlink()
    with pytest.raises(IntegrityError):
        store.retrieve_model("ft0")


def test_reopen_keeps_state_and_frozen_params(tmp_path, rng):
    store = Store.init(tmp_path / "s", EngineConfig(workers=1, codec="TENSORX"))
    models = family(rng, variants=2)
    for mid, data in models[:2]:
        store.ingest_model(mid, data)
    store.close()
    with pytest.raises(StoreError):
        Store.open(tmp_path / "s", {"sketch_seed": "7"})
    store = Store.open(tmp_path / "s", {"workers": "2"})
    assert store.config.codec == "TENSORX" and store.config.workers == 2
    rep = store.ingest_model(*models[2])
    assert all(t.action != "base" for t in rep.tensors)
    _audit(store)
    ro = Store.open(tmp_path / "s", readonly=True)
    with pytest.raises(StoreError):
        ro.ingest_model("x", models[0][1])
    assert ro.stats() == store.stats()
    with pytest.raises(StoreError):
        Store.init(tmp_path / "s")
    assert open_or_init(tmp_path / "s").stats()["models"] == 3


def test_standalone_mode(tmp_path, rng):
    store = Store.init(tmp_path / "s", EngineConfig(workers=1, standalone=True))
    models = family(rng, variants=2)
    for mid, data in models:
        store.ingest_model(mid, data)
    assert not list((store.root / "sketches").iterdir())
    codecs = {CodecId(r[0]).name for r in store.db.execute("SELECT codec FROM tensors")}
    assert codecs <= {"STANDALONE", "RAW"}
    for mid, data in models:
        assert _payloads(store.retrieve_model(mid)) == _payloads(data)
    _audit(store)


def test_incompressible_base_falls_back_to_raw(store, rng):
    noise = rng.integers(0, 256, 1 << 14, dtype=np.uint8)
    store.ingest_model("noise", make_model({"x": (noise, DType.U8, (1 << 14,))}))
    (codec, stored, nbytes), = store.db.execute("SELECT codec, stored_bytes, nbytes FROM tensors")
    assert CodecId(codec) is CodecId.RAW and stored <= nbytes + 512
    assert _payloads(store.retrieve_model("noise")) == {"x": tensor_digest(noise.tobytes())}


def test_delta_store_beats_standalone(tmp_path, rng):
    models = family(rng, variants=5, noise=0.003)
    delta = Store.init(tmp_path / "d", EngineConfig(workers=1))
    solo = Store.init(tmp_path / "s", EngineConfig(workers=1, standalone=True))
    for mid, data in models:
        delta.ingest_model(mid, data)
        solo.ingest_model(mid, data)
    assert delta.stored_bytes() < solo.stored_bytes()


def test_cumulative_ratio_rises_with_variants(store, rng):
    ratios = [store.ingest_model(mid, data).cumulative_ratio for mid, data in family(rng, variants=8, noise=0.002)]
    assert all(b >= a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] == pytest.approx(store.stats()["global_ratio"])


def test_metadata_overhead_formula(store, rng):
    for mid, data in family(rng, variants=1):
        store.ingest_model(mid, data)
    s = store.stats()
    sketch_file = 25 + 2 * 1024 * 4
    assert s["metadata_bytes"] == s["unique_tensors"] * sketch_file + 16 * s["tensor_records"]
    assert s["metadata_overhead"] == pytest.approx(s["metadata_bytes"] / s["raw_bytes"])


def test_report_json(store, rng):
    (mid, data), *_ = family(rng, variants=0)
    rep = store.ingest_model(mid, data).to_json()
    json.dumps(rep)
    assert {t["action"] for t in rep["tensors"]} == {"StoreBase"}
    assert rep["model_ratio"] == pytest.approx(1 - rep["new_stored_bytes"] / rep["raw_bytes"])


_CHILD = textwrap.dedent(
    """
    import os, sys
    from tensorstash.store import Store
    store = Store.open(sys.argv[1])
    if sys.argv[3] == "die-before-commit":
        store._commit_model = lambda *a, **k: os._exit(9)
    print("ready", flush=True)
    store.ingest_model("victim", open(sys.argv[2], "rb").read())
    print("done", flush=True)
    """
)


def _spawn(root, model_path, mode):
    return subprocess.Popen(
        [sys.executable, "-c", _CHILD, str(root), str(model_path), mode],
        stdout=subprocess.PIPE,
        text=True,
    )


def _check_consistent(root, original: bytes):
    store = Store.open(root)
    assert not (root / "journal").exists()
    assert store.stats()["stored_bytes"] == store.disk_blob_bytes()
    assert not store.verify()
    leftovers = [p for p in (root / "blobs").rglob("*") if p.is_file() and not p.name.endswith(".thdx")]
    assert not leftovers
    present = store.has_model("victim")
    if present:
        assert _payloads(store.retrieve_model("victim")) == _payloads(original)
    store.close()
    return present


def test_crash_before_commit_rolls_back(tmp_path, rng):
    root = tmp_path / "s"
    store = Store.init(root, EngineConfig(workers=1))
    models = family(rng, variants=1)
    store.ingest_model(*models[0])
    store.close()
    path = tmp_path / "victim.safetensors"
    path.write_bytes(models[1][1])
    child = _spawn(root, path, "die-before-commit")
    assert child.wait(120) == 9
    assert (root / "journal").exists()
    assert not _check_consistent(root, models[1][1])


@pytest.mark.slow
def test_random_kill_during_ingest(tmp_path):
    rng = np.random.default_rng(5)
    root = tmp_path / "s"
    Store.init(root, EngineConfig(workers=1, chunk_elements=1 << 14)).close()
    base = {f"t{i}": (synth.base_weights(1 << 18, rng), DType.BF16, (1 << 18,)) for i in range(12)}
    data = make_model(base)
    path = tmp_path / "victim.safetensors"
    path.write_bytes(data)
    outcomes = set()
    for trial in range(6):
        child = _spawn(root, path, "kill")
        assert child.stdout.readline().strip() == "ready"
        time.sleep(float(rng.uniform(0.0, 1.5)))
        if child.poll() is None:
            os.kill(child.pid, signal.SIGKILL)
        child.wait(60)
        outcomes.add(_check_consistent(root, data))
        if True in outcomes:
            break
    assert outcomes
