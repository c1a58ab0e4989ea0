"""On-disk tensor store: metadata, sketches, blobs, and the ingest/retrieve engine.

Layout under the store root::

    meta.db                       sqlite metadata (WAL mode)
    sketches/<digest>.thsk        one sketch per unique tensor
    blobs/aa/bb/<digest>.thdx     one blob per unique tensor
    journal                       present only while a write is in flight

Blob files are safetensors containers whose ``__metadata__`` carries the
``th.*`` keys, so each blob describes its own codec and base. Every write
goes through a temporary file and ``os.replace``. The journal lists the
files a write creates or replaces; reopening a store for writing after a
crash rolls uncommitted files back.
"""

from __future__ import annotations

import json
import logging
import os
import sqlite3
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from . import codec as _codec
from .codec import CodecId, DeltaBlob
from .config import EngineConfig
from .fingerprint import DIGEST_SIZE, Sketch, sketch, tensor_digest
from .index import SketchIndex
from .planner import (
    CompatKey,
    PlanDelta,
    Planner,
    PromoteToBase,
    Reassign,
    StoreBase,
    StoreDelta,
    TensorInfo,
    cluster_reduction_ratio,
)
from .predictor import DEFAULT_COEFFICIENTS, PredictorCoefficients
from .tensor_format import (
    BlobFlags,
    DType,
    FormatError,
    TensorView,
    canonical_model,
    load_model,
    parse_model,
    read_blob,
    write_blob,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BASE_CACHE_BYTES = 512 * 1024 * 1024

_SCHEMA = """
CREATE TABLE IF NOT EXISTS config (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS tensors (
    tensor_id BLOB PRIMARY KEY,
    dtype TEXT NOT NULL,
    shape TEXT NOT NULL,
    nbytes INTEGER NOT NULL,
    codec INTEGER NOT NULL,
    base_id BLOB,
    stored_bytes INTEGER NOT NULL,
    cluster_id INTEGER,
    predicted_ratio REAL,
    has_sketch INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS tensor_records (
    model_id TEXT NOT NULL,
    tensor_name TEXT NOT NULL,
    tensor_id BLOB NOT NULL,
    tensor_sketch TEXT,
    dtype TEXT NOT NULL,
    shape TEXT NOT NULL,
    PRIMARY KEY (model_id, tensor_name)
);
CREATE INDEX IF NOT EXISTS records_by_tensor ON tensor_records (tensor_id);
CREATE TABLE IF NOT EXISTS models (
    model_id TEXT PRIMARY KEY,
    seq INTEGER NOT NULL,
    metadata TEXT,
    raw_bytes INTEGER NOT NULL,
    tensor_count INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS clusters (cluster_id INTEGER PRIMARY KEY, dtype TEXT NOT NULL, shape TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS coefficients (codec TEXT PRIMARY KEY, record TEXT NOT NULL);
"""


class StoreError(Exception):
    pass


class NotFoundError(StoreError):
    pass


class IntegrityError(StoreError):
    pass


class IngestError(StoreError):
    pass


# -- reports --------------------------------------------------------------------


@dataclass
class TensorReport:
    name: str
    digest: str
    action: str
    raw_bytes: int
    stored_bytes: int
    codec: str = ""
    base: str = ""
    predicted_ratio: float | None = None
    measured_ratio: float | None = None


@dataclass
class IngestReport:
    model_id: str
    tensors: list = field(default_factory=list)
    raw_bytes: int = 0
    new_stored_bytes: int = 0
    unchanged: bool = False
    cumulative_ratio: float = 0.0

    @property
    def model_ratio(self) -> float:
        return 1.0 - self.new_stored_bytes / self.raw_bytes if self.raw_bytes else 0.0

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "raw_bytes": self.raw_bytes,
            "new_stored_bytes": self.new_stored_bytes,
            "model_ratio": self.model_ratio,
            "cumulative_ratio": self.cumulative_ratio,
            "unchanged": self.unchanged,
            "tensors": [t.__dict__ for t in self.tensors],
        }


@dataclass
class RefineReport:
    clusters: list = field(default_factory=list)
    stored_before: int = 0
    stored_after: int = 0

    @property
    def splits(self) -> int:
        return sum(c["promotions"] for c in self.clusters)

    def to_json(self) -> dict:
        return {
            "clusters": self.clusters,
            "splits": self.splits,
            "stored_before": self.stored_before,
            "stored_after": self.stored_after,
        }


# -- helpers --------------------------------------------------------------------


def _shape_text(shape) -> str:
    return json.dumps(list(shape), separators=(",", ":"))


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Journal:
    """Append-only record of files a write touches, for crash rollback.

    ``new <path>``: created by this write, deleted on rollback.
    ``old <path>``: the previous content was moved to ``<path>.old``; restored on rollback.
    ``commit``: metadata committed, keep the new files.
    """

    def __init__(self, path: Path):
        self.path = path
        self._fh = None
        self.created: list[Path] = []
        self.replaced: list[Path] = []

    def __enter__(self):
        self._fh = open(self.path, "a")
        return self

    def _line(self, text: str) -> None:
        self._fh.write(text + "\n")
        self._fh.flush()

    def new(self, p: Path) -> None:
        self.created.append(p)
        self._line(f"new {p}")

    def old(self, p: Path) -> None:
        self.replaced.append(p)
        self._line(f"old {p}")

    def commit(self) -> None:
        self._line("commit")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __exit__(self, *exc):
        self.close()
        return False

    @staticmethod
    def recover(path: Path) -> int:
        """Apply a leftover journal. Returns the number of files touched."""
        if not path.exists():
            return 0
        lines = path.read_text().splitlines()
        committed = "commit" in lines
        touched = 0
        for line in lines:
            kind, _, name = line.partition(" ")
            p = Path(name)
            if kind == "new":
                p.with_name(p.name + ".tmp").unlink(missing_ok=True)
                if not committed and p.exists():
                    p.unlink()
                    touched += 1
            elif kind == "old":
                backup = p.with_name(p.name + ".old")
                p.with_name(p.name + ".tmp").unlink(missing_ok=True)
                if backup.exists():
                    if committed:
                        backup.unlink()
                    else:
                        os.replace(backup, p)
                    touched += 1
        path.unlink()
        return touched


class _BaseCache:
    """Byte-bounded LRU of reconstructed base tensors."""

    def __init__(self, budget: int = BASE_CACHE_BYTES):
        self.budget = budget
        self._items: OrderedDict[bytes, bytes] = OrderedDict()
        self._size = 0

    def get(self, key: bytes):
        data = self._items.get(key)
        if data is not None:
            self._items.move_to_end(key)
        return data

    def put(self, key: bytes, data: bytes) -> None:
        if key in self._items or len(data) > self.budget:
            return
        self._items[key] = data
        self._size += len(data)
        while self._size > self.budget:
            _, old = self._items.popitem(last=False)
            self._size -= len(old)

    def clear(self) -> None:
        self._items.clear()
        self._size = 0


# -- the store ------------------------------------------------------------------


class Store:
    """A tensor store rooted at ``root``.

    Use :meth:`init` to create one and :meth:`open` to reopen it. Only one
    writer may use a store at a time; read-only handles skip crash recovery.
    """

    def __init__(self, root: Path, config: EngineConfig, db: sqlite3.Connection, *, readonly: bool = False):
        self.root = Path(root)
        self.config = config
        self.db = db
        self.readonly = readonly
        self.blob_reads = 0
        self._base_cache = _BaseCache()
        self._load_state()

    # lifecycle ---------------------------------------------------------------

    @classmethod
    def init(cls, root, config: EngineConfig | None = None) -> "Store":
        root = Path(root)
        config = config or EngineConfig()
        if (root / "meta.db").exists():
            raise StoreError(f"a store already exists at {root}")
        (root / "sketches").mkdir(parents=True, exist_ok=True)
        (root / "blobs").mkdir(exist_ok=True)
        db = cls._connect(root)
        with db:
            db.executescript(_SCHEMA)
            stored = dict(config.to_dict(), store=str(root), schema_version=str(SCHEMA_VERSION))
            db.executemany("INSERT INTO config (key, value) VALUES (?, ?)", sorted(stored.items()))
        return cls(root, config, db)

    @classmethod
    def open(cls, root, overrides: dict | None = None, *, readonly: bool = False) -> "Store":
        """Open an existing store. ``overrides`` (key -> value) may change anything but the sketch parameters."""
        root = Path(root)
        if not (root / "meta.db").exists():
            raise NotFoundError(f"no store at {root}")
        if not readonly:
            touched = _Journal.recover(root / "journal")
            if touched:
                log.warning("rolled back %d files from an interrupted write", touched)
        db = cls._connect(root)
        saved = dict(db.execute("SELECT key, value FROM config"))
        if int(saved.pop("schema_version", "0")) != SCHEMA_VERSION:
            raise StoreError(f"store {root} has an unsupported schema version")
        config = EngineConfig.from_dict(saved)
        if overrides:
            overrides = {k: v for k, v in overrides.items() if k != "store"}
            updated = EngineConfig.from_dict(overrides, config)
            for key in EngineConfig.FROZEN:
                if getattr(updated, key) != getattr(config, key):
                    raise StoreError(f"{key} is fixed at store creation ({getattr(config, key)})")
            config = updated
        return cls(root, config, db, readonly=readonly)

    @staticmethod
    def _connect(root: Path) -> sqlite3.Connection:
        db = sqlite3.connect(root / "meta.db", isolation_level=None, check_same_thread=False)
        db.execute("PRAGMA journal_mode=WAL")
        db.execute("PRAGMA synchronous=NORMAL")
        return db

    def close(self) -> None:
        self.db.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # paths -------------------------------------------------------------------

    def blob_path(self, digest: bytes) -> Path:
        h = digest.hex()
        return self.root / "blobs" / h[:2] / h[2:4] / f"{h}.thdx"

    def sketch_path(self, digest: bytes) -> Path:
        return self.root / "sketches" / f"{digest.hex()}.thsk"

    # state ----------------------------------------------------------------------

    @property
    def codec_id(self) -> CodecId:
        return CodecId[self.config.codec]

    def coefficients(self, codec: str | None = None) -> PredictorCoefficients:
        codec = codec or self.config.codec
        row = self.db.execute("SELECT record FROM coefficients WHERE codec = ?", (codec,)).fetchone()
        return PredictorCoefficients.from_record(row[0]) if row else DEFAULT_COEFFICIENTS[codec]

    def save_coefficients(self, coeffs: PredictorCoefficients) -> None:
        with self.db:
            self.db.execute(
                "INSERT OR REPLACE INTO coefficients (codec, record) VALUES (?, ?)",
                (coeffs.codec_id, coeffs.to_record()),
            )
        self._load_state()

    def _load_state(self) -> None:
        """(Re)build the planner and the sketch index from committed metadata."""
        self.index = SketchIndex(self.config.sketch_params(), threshold=self.config.index_threshold)
        self.planner = Planner(self.config.planner_config(), self.coefficients(), query=self._query)
        self._pending_bases: list[bytes] = []
        names = {}
        for tid, name in self.db.execute(
            "SELECT tensor_id, MIN(tensor_name) FROM tensor_records GROUP BY tensor_id"
        ):
            names[bytes(tid)] = name
        rows = self.db.execute(
            "SELECT tensor_id, dtype, shape, nbytes, base_id, cluster_id, predicted_ratio "
            "FROM tensors WHERE cluster_id IS NOT NULL ORDER BY base_id IS NOT NULL, rowid"
        ).fetchall()
        for tid, dtype, shape, nbytes, base_id, cluster_id, ratio in rows:
            tid = bytes(tid)
            sk = Sketch.from_bytes(self.sketch_path(tid).read_bytes())
            info = TensorInfo(tid, names.get(tid, ""), CompatKey(dtype, tuple(json.loads(shape))), nbytes, sk)
            base = bytes(base_id) if base_id is not None else None
            self.planner.restore(info, cluster_id, base, ratio or 0.0)
            if base is None:
                self.index.add(tid, info.compat, sk)
        for name, shape in self.db.execute("SELECT DISTINCT tensor_name, shape FROM tensor_records"):
            self.planner.seen_names.add((name, tuple(json.loads(shape))))

    def _query(self, sk: Sketch, compat: CompatKey, k: int) -> list[bytes]:
        found = self.index.query_candidates(sk, compat, k)
        # bases created earlier in the same (possibly dry-run) operation
        extra = [b for b in self._pending_bases if b not in found and self.planner.tensors[b].compat == compat]
        return found + extra

    def _sync_index(self, plan: PlanDelta) -> None:
        for action in plan:
            if isinstance(action, (StoreBase, PromoteToBase)):
                info = self.planner.tensors[action.digest]
                self.index.add(action.digest, info.compat, info.sketch)

    def _require_writable(self) -> None:
        if self.readonly:
            raise StoreError("store is opened read-only")

    # blobs ----------------------------------------------------------------------

    def _read_blob_file(self, digest: bytes) -> bytes:
        path = self.blob_path(digest)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise IntegrityError(f"blob for tensor {digest.hex()} is missing") from None
        self.blob_reads += 1
        return data

    def reconstruct(self, digest: bytes, *, verify: bool = True, cache: dict | None = None) -> bytes:
        """Raw bytes of a stored tensor, checked against its digest."""
        if cache is not None and digest in cache:
            return cache[digest]
        data = self._read_blob_file(digest)
        try:
            flags, payload = read_blob(data)
            stored_codec = CodecId[flags.codec_id]
            if stored_codec == CodecId.RAW:
                out = bytes(payload)
            else:
                blob = DeltaBlob.from_bytes(payload)
                if blob.codec_id != stored_codec or blob.element_count * flags.dtype.itemsize != flags.raw_len:
                    raise IntegrityError(f"blob {digest.hex()} container disagrees with its header")
                base = None
                if blob.codec_id.is_delta:
                    if flags.base_digest is None:
                        raise IntegrityError(f"delta blob {digest.hex()} has no base reference")
                    base = self.reconstruct(flags.base_digest, verify=verify, cache=cache)
                out = _codec.decode(blob, base, workers=self.config.workers)
        except (FormatError, _codec.CodecError, KeyError, ValueError) as exc:
            if isinstance(exc, IntegrityError):
                raise
            raise IntegrityError(f"blob {digest.hex()} is unreadable: {exc}") from None
        if verify and tensor_digest(out) != digest:
            raise IntegrityError(f"tensor {digest.hex()} does not match its digest after decode")
        if cache is not None:
            cache[digest] = out
        return out

    def _base_bytes(self, digest: bytes) -> bytes:
        data = self._base_cache.get(digest)
        if data is None:
            data = self.reconstruct(digest)
            self._base_cache.put(digest, data)
        return data

    def _encode_base(self, view: TensorView, raw: bytes) -> tuple[bytes, CodecId]:
        if self.config.base_compress:
            blob = _codec.encode(CodecId.STANDALONE, raw, None, view.dtype, self.config.chunk_elements,
                                 workers=self.config.workers)
            if len(blob) < len(raw):
                flags = BlobFlags(CodecId.STANDALONE.name, view.dtype, view.shape, len(raw))
                return write_blob(None, flags, blob.to_bytes()), CodecId.STANDALONE
        flags = BlobFlags(CodecId.RAW.name, view.dtype, view.shape, len(raw))
        return write_blob(view, flags), CodecId.RAW

    def _encode_delta(self, view: TensorView, raw: bytes, base: bytes) -> bytes:
        blob = _codec.encode(self.codec_id, raw, self._base_bytes(base), view.dtype, self.config.chunk_elements,
                             workers=self.config.workers, base_digest=base)
        flags = BlobFlags(self.codec_id.name, view.dtype, view.shape, len(raw), base)
        return write_blob(None, flags, blob.to_bytes())

    def _put(self, journal: _Journal, digest: bytes, data: bytes, *, replace: bool = False) -> None:
        path = self.blob_path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        if replace:
            journal.old(path)
            os.replace(path, path.with_name(path.name + ".old"))
        else:
            journal.new(path)
        _write_atomic(path, data)

    # ingest ---------------------------------------------------------------------

    def model_ids(self) -> list[str]:
        return [r[0] for r in self.db.execute("SELECT model_id FROM models ORDER BY seq")]

    def has_model(self, model_id: str) -> bool:
        return self.db.execute("SELECT 1 FROM models WHERE model_id = ?", (model_id,)).fetchone() is not None

    @staticmethod
    def _parse(source):
        try:
            if isinstance(source, (bytes, bytearray, memoryview)):
                return parse_model(source, with_metadata=True)
            return load_model(source, with_metadata=True)
        except FormatError:
            raise
        except OSError as exc:
            raise FormatError(f"cannot read {source}: {exc.strerror}") from None

    def ingest_model(self, model_id: str, source) -> IngestReport:
        """Store one model file (path or bytes); all-or-nothing."""
        self._require_writable()
        try:
            tensors, metadata = self._parse(source)
        except FormatError as exc:
            raise IngestError(f"{model_id}: {exc}") from None
        report = IngestReport(model_id)
        digests = [tensor_digest(t.data) for t in tensors]
        if self.has_model(model_id):
            old = dict(self.db.execute(
                "SELECT tensor_name, tensor_id FROM tensor_records WHERE model_id = ?", (model_id,)
            ))
            if {t.name: d for t, d in zip(tensors, digests)} == {k: bytes(v) for k, v in old.items()}:
                report.unchanged = True
                report.raw_bytes = sum(t.nbytes for t in tensors)
                report.cumulative_ratio = self.stats()["global_ratio"]
                return report
            raise IngestError(f"model {model_id!r} already exists with different content")

        journal = _Journal(self.root / "journal")
        try:
            with journal:
                rows, records = self._ingest_tensors(tensors, digests, journal, report)
                self._commit_model(model_id, tensors, digests, metadata, rows, records, report)
                journal.commit()
            (self.root / "journal").unlink()
        except BaseException as exc:
            journal.close()
            _Journal.recover(self.root / "journal")
            self._base_cache.clear()
            self._load_state()
            if isinstance(exc, (KeyboardInterrupt, SystemExit)):
                raise
            if isinstance(exc, IngestError):
                raise
            raise IngestError(f"{model_id}: {exc}") from exc
        report.cumulative_ratio = self.stats()["global_ratio"]
        return report

    def _known(self, digest: bytes) -> bool:
        return self.db.execute("SELECT 1 FROM tensors WHERE tensor_id = ?", (digest,)).fetchone() is not None

    def _ingest_tensors(self, tensors, digests, journal: _Journal, report: IngestReport):
        rows: dict[bytes, tuple] = {}
        records = []
        params = self.config.sketch_params()
        self._pending_bases = []
        for view, digest in zip(tensors, digests):
            report.raw_bytes += view.nbytes
            tr = TensorReport(view.name, digest.hex(), "dedup", view.nbytes, 0)
            report.tensors.append(tr)
            sketch_ref = None
            if digest in rows or self._known(digest):
                if self.sketch_path(digest).exists() or (digest in rows and rows[digest][-1]):
                    sketch_ref = self.sketch_path(digest).name
                if not self.config.standalone:
                    self.planner.seen_names.add((view.name, view.shape))
                records.append((view, digest, sketch_ref))
                continue
            raw = bytes(view.data)
            if self.config.standalone:
                data, cid = self._encode_base(view, raw)
                self._put(journal, digest, data)
                rows[digest] = (view, cid, None, len(data), None, None, False)
                tr.action, tr.codec, tr.stored_bytes = "StoreBase", cid.name, len(data)
                tr.measured_ratio = 1.0 - len(data) / view.nbytes if view.nbytes else 0.0
                records.append((view, digest, None))
                continue

            sk = sketch(view, params, workers=self.config.workers)
            spath = self.sketch_path(digest)
            journal.new(spath)
            _write_atomic(spath, sk.to_bytes())
            sketch_ref = spath.name
            info = TensorInfo(digest, view.name, CompatKey.of(view.dtype, view.shape), view.nbytes, sk)
            plan = self.planner.assign(info)
            action = plan.actions[0]
            predicted = None
            if isinstance(action, StoreDelta):
                data = self._encode_delta(view, raw, action.base_digest)
                predicted = action.predicted_ratio
                if len(data) >= view.nbytes:
                    # the delta does not pay for itself; keep the tensor whole as a new base
                    self.planner.make_base(digest)
                    action = StoreBase(digest)
                    plan = PlanDelta([action])
            if isinstance(action, StoreBase):
                data, cid = self._encode_base(view, raw)
                base = None
                self._pending_bases.append(digest)
            else:
                cid, base = self.codec_id, action.base_digest
            self._put(journal, digest, data)
            self._sync_index(plan)
            cluster = self.planner.cluster_of[digest]
            rows[digest] = (view, cid, base, len(data), cluster, predicted, True)
            tr.action = "StoreBase" if base is None else "StoreDelta"
            tr.codec, tr.stored_bytes = cid.name, len(data)
            tr.base = "" if base is None else base.hex()
            tr.predicted_ratio = predicted if base is not None else None
            tr.measured_ratio = 1.0 - len(data) / view.nbytes if view.nbytes else 0.0
            records.append((view, digest, sketch_ref))
        report.new_stored_bytes = sum(r[3] for r in rows.values())
        self._pending_bases = []
        return rows, records

    def _commit_model(self, model_id, tensors, digests, metadata, rows, records, report) -> None:
        db = self.db
        db.execute("BEGIN IMMEDIATE")
        try:
            seq = db.execute("SELECT COALESCE(MAX(seq), 0) + 1 FROM models").fetchone()[0]
            for digest, (view, cid, base, stored, cluster, predicted, has_sketch) in rows.items():
                db.execute(
                    "INSERT INTO tensors (tensor_id, dtype, shape, nbytes, codec, base_id, stored_bytes, cluster_id,"
                    " predicted_ratio, has_sketch) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    (digest, view.dtype.name, _shape_text(view.shape), view.nbytes, int(cid), base, stored, cluster,
                     predicted, int(has_sketch)),
                )
                if cluster is not None:
                    db.execute(
                        "INSERT OR IGNORE INTO clusters (cluster_id, dtype, shape) VALUES (?, ?, ?)",
                        (cluster, view.dtype.name, _shape_text(view.shape)),
                    )
            db.executemany(
                "INSERT INTO tensor_records (model_id, tensor_name, tensor_id, tensor_sketch, dtype, shape)"
                " VALUES (?, ?, ?, ?, ?, ?)",
                [(model_id, v.name, d, s, v.dtype.name, _shape_text(v.shape)) for v, d, s in records],
            )
            db.execute(
                "INSERT INTO models (model_id, seq, metadata, raw_bytes, tensor_count) VALUES (?, ?, ?, ?, ?)",
                (model_id, seq, json.dumps(metadata) if metadata else None, report.raw_bytes, len(tensors)),
            )
            db.execute("COMMIT")
        except BaseException:
            db.execute("ROLLBACK")
            raise

    def ingest_many(self, items, *, keep_going: bool = False, on_report=None) -> tuple[list, list]:
        """Ingest ``(model_id, source)`` pairs in order, refining on the configured cadence.

        Returns (reports, failures) where failures are ``(model_id, message)``.
        """
        reports, failures = [], []
        since_refine = 0
        for model_id, source in items:
            try:
                rep = self.ingest_model(model_id, source)
            except IngestError as exc:
                failures.append((model_id, str(exc)))
                if not keep_going:
                    break
                continue
            reports.append(rep)
            if on_report is not None:
                on_report(rep)
            since_refine += not rep.unchanged
            if self.config.refine_every and since_refine >= self.config.refine_every and not self.config.standalone:
                self.refine()
                since_refine = 0
        if not self.config.refine_every and since_refine and not self.config.standalone:
            self.refine()
        return reports, failures

    def plan_model(self, source) -> PlanDelta:
        """Planner actions ingesting ``source`` would produce; nothing is written."""
        tensors, _ = self._parse(source)
        saved_planner, saved_pending = self.planner, self._pending_bases
        self.planner = saved_planner.copy()
        self._pending_bases = []
        out = PlanDelta()
        try:
            params = self.config.sketch_params()
            for view in tensors:
                digest = tensor_digest(view.data)
                if self.config.standalone:
                    if not self._known(digest) and digest not in self._pending_bases:
                        self._pending_bases.append(digest)
                        out.actions.append(StoreBase(digest))
                    continue
                if digest in self.planner.tensors:
                    self.planner.seen_names.add((view.name, view.shape))
                    continue
                info = TensorInfo(digest, view.name, CompatKey.of(view.dtype, view.shape), view.nbytes,
                                  sketch(view, params, workers=self.config.workers))
                plan = self.planner.assign(info)
                for action in plan:
                    if isinstance(action, StoreBase):
                        self._pending_bases.append(digest)
                out.extend(plan)
        finally:
            self.planner, self._pending_bases = saved_planner, saved_pending
        return out

    # refine ---------------------------------------------------------------------

    def refine(self, *, force: bool = False, clusters=None) -> RefineReport:
        """Run Phase II splitting and rewrite the affected blobs, one cluster at a time."""
        self._require_writable()
        report = RefineReport(stored_before=self.stored_bytes())
        ids = sorted(self.planner.clusters) if clusters is None else list(clusters)
        for cid in ids:
            cl = self.planner.clusters[cid]
            if not (force or self.planner.needs_split(cl)):
                continue
            before = cluster_reduction_ratio(cl)
            stored_before = self._cluster_stored(cid)
            journal = _Journal(self.root / "journal")
            try:
                with journal:
                    plan = self.planner.split(cl)
                    if not plan:
                        (self.root / "journal").unlink()
                        continue
                    self._apply_refine(cid, plan, journal)
                    journal.commit()
                _Journal.recover(self.root / "journal")
            except BaseException:
                journal.close()
                _Journal.recover(self.root / "journal")
                self._base_cache.clear()
                self._load_state()
                raise
            self._sync_index(plan)
            report.clusters.append({
                "cluster": cid,
                "promotions": sum(isinstance(a, PromoteToBase) for a in plan),
                "reassignments": sum(isinstance(a, Reassign) for a in plan),
                "ratio_before": before,
                "ratio_after": cluster_reduction_ratio(cl),
                "stored_before": stored_before,
                "stored_after": self._cluster_stored(cid),
            })
        report.stored_after = self.stored_bytes()
        return report

    def _view_of(self, digest: bytes, raw: bytes) -> TensorView:
        dtype, shape = self.db.execute("SELECT dtype, shape FROM tensors WHERE tensor_id = ?", (digest,)).fetchone()
        return TensorView(digest.hex(), DType.from_str(dtype), tuple(json.loads(shape)), memoryview(raw))

    def _apply_refine(self, cid: int, plan: PlanDelta, journal: _Journal) -> None:
        updates = {}
        # reconstruct every touched tensor before anything is rewritten
        originals = {}
        for action in plan:
            if action.digest not in originals:
                originals[action.digest] = self.reconstruct(action.digest)
        for action in plan:
            raw = originals[action.digest]
            view = self._view_of(action.digest, raw)
            if isinstance(action, PromoteToBase):
                data, codec = self._encode_base(view, raw)
                updates[action.digest] = (int(codec), None, len(data), None)
                self._base_cache.put(action.digest, raw)
            else:
                data = self._encode_delta(view, raw, action.new_base_digest)
                updates[action.digest] = (int(self.codec_id), action.new_base_digest, len(data),
                                          action.predicted_ratio)
            self._put(journal, action.digest, data, replace=True)
        db = self.db
        db.execute("BEGIN IMMEDIATE")
        try:
            for digest, (codec, base, stored, predicted) in updates.items():
                db.execute(
                    "UPDATE tensors SET codec = ?, base_id = ?, stored_bytes = ?, predicted_ratio = ? "
                    "WHERE tensor_id = ?",
                    (codec, base, stored, predicted, digest),
                )
            db.execute("COMMIT")
        except BaseException:
            db.execute("ROLLBACK")
            raise

    def _cluster_stored(self, cid: int) -> int:
        return self.db.execute(
            "SELECT COALESCE(SUM(stored_bytes), 0) FROM tensors WHERE cluster_id = ?", (cid,)
        ).fetchone()[0]

    # retrieve ------------------------------------------------------------------

    def records(self, model_id: str) -> list[tuple[str, bytes, str, tuple]]:
        rows = self.db.execute(
            "SELECT tensor_name, tensor_id, dtype, shape FROM tensor_records WHERE model_id = ? ORDER BY tensor_name",
            (model_id,),
        ).fetchall()
        if not rows and not self.has_model(model_id):
            raise NotFoundError(f"model {model_id!r} not found")
        return [(n, bytes(t), d, tuple(json.loads(s))) for n, t, d, s in rows]

    def retrieve_model(self, model_id: str, *, verify: bool = True) -> bytes:
        """The model file with byte-identical tensor payloads and a canonical header."""
        records = self.records(model_id)
        (meta,) = self.db.execute("SELECT metadata FROM models WHERE model_id = ?", (model_id,)).fetchone()
        cache: dict[bytes, bytes] = {}
        views = []
        for name, digest, dtype, shape in records:
            raw = self.reconstruct(digest, verify=verify, cache=cache)
            views.append(TensorView(name, DType.from_str(dtype), shape, memoryview(raw)))
        return canonical_model(views, json.loads(meta) if meta else None)

    def verify(self, model_id: str | None = None) -> list[dict]:
        """Decode and re-digest every stored tensor (or one model's); returns the failures."""
        if model_id is None:
            digests = [bytes(r[0]) for r in self.db.execute("SELECT tensor_id FROM tensors ORDER BY rowid")]
        else:
            digests = list(dict.fromkeys(d for _, d, _, _ in self.records(model_id)))
        failures = []
        for digest in digests:
            try:
                self.reconstruct(digest)
            except IntegrityError as exc:
                failures.append({"tensor_id": digest.hex(), "error": str(exc)})
            path = self.blob_path(digest)
            row = self.db.execute("SELECT stored_bytes FROM tensors WHERE tensor_id = ?", (digest,)).fetchone()
            if path.exists() and row and path.stat().st_size != row[0]:
                failures.append({"tensor_id": digest.hex(), "error": "blob size differs from the recorded size"})
        return failures

    # stats ---------------------------------------------------------------------

    def stored_bytes(self) -> int:
        return self.db.execute("SELECT COALESCE(SUM(stored_bytes), 0) FROM tensors").fetchone()[0]

    def stats(self) -> dict:
        db = self.db
        raw = db.execute("SELECT COALESCE(SUM(raw_bytes), 0) FROM models").fetchone()[0]
        records = db.execute("SELECT COUNT(*) FROM tensor_records").fetchone()[0]
        unique, unique_raw, stored, sketched = db.execute(
            "SELECT COUNT(*), COALESCE(SUM(nbytes), 0), COALESCE(SUM(stored_bytes), 0), COALESCE(SUM(has_sketch), 0)"
            " FROM tensors"
        ).fetchone()
        bases = db.execute("SELECT COUNT(*) FROM tensors WHERE base_id IS NULL").fetchone()[0]
        sketch_bytes = 0
        if sketched:
            sketch_bytes = sketched * len(
                Sketch(self.config.sketch_params(), [[0] * self.config.sketch_width] * self.config.sketch_depth)
                .to_bytes()
            )
        meta_bytes = sketch_bytes + DIGEST_SIZE * records
        clusters = []
        for cid, cl in sorted(self.planner.clusters.items()):
            c_raw, c_stored = db.execute(
                "SELECT COALESCE(SUM(nbytes), 0), COALESCE(SUM(stored_bytes), 0) FROM tensors WHERE cluster_id = ?",
                (cid,),
            ).fetchone()
            clusters.append({
                "cluster": cid,
                "compat": f"{cl.compat.dtype}{list(cl.compat.shape)}",
                "members": len(cl),
                "bases": len(cl.bases),
                "predicted_ratio": cluster_reduction_ratio(cl),
                "measured_ratio": 1.0 - c_stored / c_raw if c_raw else 0.0,
            })
        return {
            "models": db.execute("SELECT COUNT(*) FROM models").fetchone()[0],
            "tensor_records": records,
            "unique_tensors": unique,
            "dedup_count": records - unique,
            "bases": bases,
            "deltas": unique - bases,
            "raw_bytes": raw,
            "unique_raw_bytes": unique_raw,
            "stored_bytes": stored,
            "global_ratio": 1.0 - stored / raw if raw else 0.0,
            "metadata_bytes": meta_bytes,
            "metadata_overhead": meta_bytes / raw if raw else 0.0,
            "clusters": clusters,
        }

    def disk_blob_bytes(self) -> int:
        """Sum of blob file sizes actually on disk (audit counterpart of ``stored_bytes``)."""
        total = 0
        for dirpath, _, files in os.walk(self.root / "blobs"):
            total += sum(os.path.getsize(os.path.join(dirpath, f)) for f in files if f.endswith(".thdx"))
        return total


def open_or_init(root, config: EngineConfig | None = None) -> Store:
    root = Path(root)
    if (root / "meta.db").exists():
        return Store.open(root, config.to_dict() if config is not None else None)
    return Store.init(root, config)
