"""Durable content-addressed storage: blobs, source snapshots, job logs,
the append-only reproducibility ledger, and build comparison.

On-disk layout under the data directory:

    blobs/<first 2 hex>/<remaining 62 hex>   content-addressed blobs
    ledger.jsonl                             one JSON object per line, fsync'd
    logs/<job_id>.log                        append-only job logs
    snapshots/<commit_id>.manifest           canonical snapshot manifests
"""

from __future__ import annotations

import hashlib
import json
import os
import stat
import tarfile
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

TERMINAL_STATUSES = {"succeeded", "failed", "timed_out", "canceled"}

REGULAR_MODE = "100644"
EXECUTABLE_MODE = "100755"


class StoreError(Exception):
    """Base class for storage failures."""


class BlobNotFound(StoreError):
    pass


class CorruptBlob(StoreError):
    """On-disk bytes no longer match their digest."""


class SnapshotNotFound(StoreError):
    pass


class PathRejected(StoreError):
    """Absolute path, traversal, or unsupported file type in a tree."""


class DuplicateJob(StoreError):
    """A ledger entry for this job_id already exists."""


class NotTerminal(StoreError):
    pass


class MatrixShapeMismatch(StoreError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj: object) -> bytes:
    """Deterministic JSON encoding used for digested records."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def validate_relative_path(path: str) -> str:
    """Reject absolute paths and `..` traversal; returns the path unchanged."""
    if not path:
        raise PathRejected("empty path")
    if path.startswith("/") or (len(path) > 1 and path[1] == ":"):
        raise PathRejected(f"absolute path not allowed: {path!r}")
    parts = path.split("/")
    if any(part in ("", "..") for part in parts):
        raise PathRejected(f"path traversal not allowed: {path!r}")
    return path


class BlobStore:
    """Content-addressed blob storage keyed by SHA-256.

    Writes go to a temp file then an atomic rename keyed by digest, so
    concurrent puts of the same content are safe and idempotent.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        if len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
            raise BlobNotFound(f"not a valid digest: {digest!r}")
        return self.root / digest[:2] / digest[2:]

    def put(self, data: bytes) -> str:
        digest = sha256_hex(data)
        path = self._path(digest)
        if path.exists():
            return digest
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
        return digest

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise BlobNotFound(digest) from None
        if sha256_hex(data) != digest:
            raise CorruptBlob(f"stored bytes for {digest} no longer match")
        return data

    def has(self, digest: str) -> bool:
        try:
            return self._path(digest).exists()
        except BlobNotFound:
            return False


@dataclass(frozen=True)
class SnapshotEntry:
    path: str
    mode: str  # REGULAR_MODE or EXECUTABLE_MODE
    digest: str


@dataclass(frozen=True)
class SnapshotManifest:
    """Canonical listing of a source tree; its digest is the commit id.

    Serialization is one `<mode> <hex digest> <path>\\n` line per entry,
    entries sorted bytewise ascending by path.
    """

    entries: tuple[SnapshotEntry, ...]

    def canonical_bytes(self) -> bytes:
        lines = [f"{e.mode} {e.digest} {e.path}\n" for e in self.entries]
        return "".join(lines).encode("utf-8")

    def digest(self) -> str:
        return sha256_hex(self.canonical_bytes())

    @staticmethod
    def parse(text: str) -> "SnapshotManifest":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            try:
                mode, digest, path = line.split(" ", 2)
            except ValueError:
                raise StoreError(f"malformed manifest line {lineno}: {line!r}") from None
            if mode not in (REGULAR_MODE, EXECUTABLE_MODE):
                raise StoreError(f"manifest line {lineno}: unknown mode {mode!r}")
            entries.append(SnapshotEntry(path=path, mode=mode, digest=digest))
        return SnapshotManifest(entries=tuple(entries))


def _collect_tree_entries(source: Path) -> list[tuple[str, str, bytes]]:
    """Walk a directory, returning (path, mode, content) for every regular file."""
    collected: list[tuple[str, str, bytes]] = []
    for dirpath, dirnames, filenames in os.walk(source):
        dirnames.sort()
        for name in filenames:
            full = Path(dirpath) / name
            rel = full.relative_to(source).as_posix()
            validate_relative_path(rel)
            st = os.lstat(full)
            if not stat.S_ISREG(st.st_mode):
                raise PathRejected(f"unsupported file type (not a regular file): {rel}")
            mode = EXECUTABLE_MODE if st.st_mode & stat.S_IXUSR else REGULAR_MODE
            collected.append((rel, mode, full.read_bytes()))
    collected.sort(key=lambda item: item[0].encode("utf-8"))
    return collected


def _collect_tarball_entries(source: Path) -> list[tuple[str, str, bytes]]:
    collected: list[tuple[str, str, bytes]] = []
    with tarfile.open(source, mode="r:*") as tar:
        for member in tar:
            if member.isdir():
                continue
            if not member.isreg():
                raise PathRejected(
                    f"unsupported tar member type (not a regular file): {member.name}"
                )
            rel = member.name.lstrip("./")
            validate_relative_path(rel)
            handle = tar.extractfile(member)
            assert handle is not None
            mode = EXECUTABLE_MODE if member.mode & stat.S_IXUSR else REGULAR_MODE
            collected.append((rel, mode, handle.read()))
    collected.sort(key=lambda item: item[0].encode("utf-8"))
    return collected


def snapshot_of_tree(source: str | Path) -> SnapshotManifest:
    """Canonical manifest of a directory tree without storing any blobs."""
    entries = tuple(
        SnapshotEntry(path=rel, mode=mode, digest=sha256_hex(content))
        for rel, mode, content in _collect_tree_entries(Path(source))
    )
    return SnapshotManifest(entries=entries)


@dataclass(frozen=True)
class ArtifactEntry:
    path: str
    size: int
    digest: str


@dataclass(frozen=True)
class ArtifactManifest:
    """Sorted listing of the files a job preserved, by content digest."""

    job_id: int
    entries: tuple[ArtifactEntry, ...]

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "entries": [
                {"path": e.path, "size": e.size, "digest": e.digest} for e in self.entries
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "ArtifactManifest":
        entries = tuple(
            ArtifactEntry(path=e["path"], size=int(e["size"]), digest=e["digest"])
            for e in data.get("entries", [])
        )
        return ArtifactManifest(job_id=int(data["job_id"]), entries=entries)

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @staticmethod
    def build(job_id: int, entries: Iterable[ArtifactEntry]) -> "ArtifactManifest":
        ordered = tuple(sorted(entries, key=lambda e: e.path.encode("utf-8")))
        return ArtifactManifest(job_id=job_id, entries=ordered)


@dataclass(frozen=True)
class LedgerEntry:
    """One completed job: binds source version, log, and artifacts together."""

    repo_id: str
    commit_id: str
    build_id: int
    job_id: int
    matrix_index: int
    overall: str
    fingerprint_digest: str  # empty when the job never produced a fingerprint
    log_digest: str
    artifact_manifest_digest: str
    completed_at: str

    def to_dict(self) -> dict:
        return {
            "repo_id": self.repo_id,
            "commit_id": self.commit_id,
            "build_id": self.build_id,
            "job_id": self.job_id,
            "matrix_index": self.matrix_index,
            "overall": self.overall,
            "fingerprint_digest": self.fingerprint_digest,
            "log_digest": self.log_digest,
            "artifact_manifest_digest": self.artifact_manifest_digest,
            "completed_at": self.completed_at,
        }

    @staticmethod
    def from_dict(data: dict) -> "LedgerEntry":
        return LedgerEntry(
            repo_id=data["repo_id"],
            commit_id=data["commit_id"],
            build_id=int(data["build_id"]),
            job_id=int(data["job_id"]),
            matrix_index=int(data["matrix_index"]),
            overall=data["overall"],
            fingerprint_digest=data["fingerprint_digest"],
            log_digest=data["log_digest"],
            artifact_manifest_digest=data["artifact_manifest_digest"],
            completed_at=data["completed_at"],
        )


class Ledger:
    """Append-only JSONL ledger. Every append is fsync'd before it returns,
    so an acknowledged entry survives a crash. Appends are serialized through
    a single lock; reads never take it.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._job_ids: set[int] = set()
        self._recover()

    def _recover(self) -> None:
        """Drop a torn final line left by a crash mid-append (it was never
        acknowledged); corruption anywhere earlier is an error, not data loss
        to paper over."""
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        raw_lines = data.splitlines(keepends=True)
        keep = 0
        for index, raw in enumerate(raw_lines):
            stripped = raw.strip()
            parsed = None
            if stripped:
                try:
                    parsed = LedgerEntry.from_dict(json.loads(stripped))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    if index == len(raw_lines) - 1:
                        break
                    raise StoreError(
                        f"ledger corrupted at line {index + 1} of {self.path}"
                    ) from None
            if not raw.endswith(b"\n"):
                break
            if parsed is not None:
                self._job_ids.add(parsed.job_id)
            keep += len(raw)
        if keep < len(data):
            with open(self.path, "r+b") as handle:
                handle.truncate(keep)
                handle.flush()
                os.fsync(handle.fileno())

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            if entry.job_id in self._job_ids:
                raise DuplicateJob(f"ledger already has job {entry.job_id}")
            line = json.dumps(entry.to_dict(), sort_keys=True) + "\n"
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line)
                handle.flush()
                os.fsync(handle.fileno())
            self._job_ids.add(entry.job_id)

    def entries(self) -> Iterator[LedgerEntry]:
        if not self.path.exists():
            return
        with open(self.path, "r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    yield LedgerEntry.from_dict(json.loads(line))

    def query(self, repo_id: str, commit_id: str) -> list[LedgerEntry]:
        """All completed runs of one commit, in completion order."""
        return [
            e for e in self.entries() if e.repo_id == repo_id and e.commit_id == commit_id
        ]


class Store:
    """Facade over one data directory: blobs, ledger, logs, snapshots."""

    def __init__(self, data_dir: str | Path) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.blobs = BlobStore(self.data_dir / "blobs")
        self.ledger = Ledger(self.data_dir / "ledger.jsonl")
        (self.data_dir / "logs").mkdir(exist_ok=True)
        (self.data_dir / "snapshots").mkdir(exist_ok=True)

    def log_path(self, job_id: int) -> Path:
        return self.data_dir / "logs" / f"{job_id}.log"

    def _manifest_path(self, commit_id: str) -> Path:
        return self.data_dir / "snapshots" / f"{commit_id}.manifest"

    def has_snapshot(self, commit_id: str) -> bool:
        return self._manifest_path(commit_id).exists()

    def snapshot_manifest(self, commit_id: str) -> SnapshotManifest:
        path = self._manifest_path(commit_id)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise SnapshotNotFound(commit_id) from None
        return SnapshotManifest.parse(text)

    def import_snapshot(self, source: str | Path) -> tuple[SnapshotManifest, str]:
        """Store every file blob of a directory tree or tarball plus the
        canonical manifest; returns (manifest, commit_id).
        """
        source = Path(source)
        if source.is_dir():
            collected = _collect_tree_entries(source)
        elif source.is_file():
            collected = _collect_tarball_entries(source)
        else:
            raise SnapshotNotFound(f"no such directory or tarball: {source}")
        entries = []
        seen: set[str] = set()
        for rel, mode, content in collected:
            if rel in seen:
                raise PathRejected(f"duplicate path in tree: {rel}")
            seen.add(rel)
            digest = self.blobs.put(content)
            entries.append(SnapshotEntry(path=rel, mode=mode, digest=digest))
        manifest = SnapshotManifest(entries=tuple(entries))
        commit_id = manifest.digest()
        path = self._manifest_path(commit_id)
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(manifest.canonical_bytes())
            os.replace(tmp, path)
        return manifest, commit_id

    def export_snapshot(self, commit_id: str, target: str | Path) -> None:
        """Reproduce the snapshot tree exactly (paths, modes, contents)."""
        manifest = self.snapshot_manifest(commit_id)
        target = Path(target)
        target.mkdir(parents=True, exist_ok=True)
        for entry in manifest.entries:
            dest = target / entry.path
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(self.blobs.get(entry.digest))
            if entry.mode == EXECUTABLE_MODE:
                dest.chmod(0o755)
            else:
                dest.chmod(0o644)


@dataclass(frozen=True)
class PathVerdict:
    path: str
    verdict: str  # identical | differs | only_in_a | only_in_b
    digest_a: str | None = None
    digest_b: str | None = None


@dataclass(frozen=True)
class CompareJob:
    """The slice of a completed job that build comparison needs."""

    matrix_index: int
    job_id: int
    overall: str
    manifest: ArtifactManifest
    fingerprint: dict | None


@dataclass(frozen=True)
class JobComparison:
    matrix_index: int
    job_a: int
    job_b: int
    path_verdicts: tuple[PathVerdict, ...]
    fingerprint_diffs: tuple[tuple[str, object, object], ...]


@dataclass(frozen=True)
class ReproReport:
    """Pairwise artifact diff of two builds of the same snapshot.

    The verdict depends only on artifact content: fingerprint differences
    (different host, different CPU count) are reported but never flip it.
    """

    pairs: tuple[JobComparison, ...]
    verdict: str  # reproduced | diverged

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "pairs": [
                {
                    "matrix_index": pair.matrix_index,
                    "job_a": pair.job_a,
                    "job_b": pair.job_b,
                    "paths": [
                        {
                            "path": v.path,
                            "verdict": v.verdict,
                            "digest_a": v.digest_a,
                            "digest_b": v.digest_b,
                        }
                        for v in pair.path_verdicts
                    ],
                    "fingerprint_diffs": [
                        {"field": f, "a": a, "b": b} for f, a, b in pair.fingerprint_diffs
                    ],
                }
                for pair in self.pairs
            ],
        }


def _diff_fingerprints(
    fp_a: dict | None, fp_b: dict | None
) -> tuple[tuple[str, object, object], ...]:
    a = fp_a or {}
    b = fp_b or {}
    diffs = []
    for key in sorted(set(a) | set(b)):
        if a.get(key) != b.get(key):
            diffs.append((key, a.get(key), b.get(key)))
    return tuple(diffs)


def compare_builds(jobs_a: list[CompareJob], jobs_b: list[CompareJob]) -> ReproReport:
    """Diff two builds' jobs pairwise by matrix_index.

    Raises NotTerminal when any job has not finished, MatrixShapeMismatch
    when the builds do not expand to the same matrix.
    """
    for job in list(jobs_a) + list(jobs_b):
        if job.overall not in TERMINAL_STATUSES:
            raise NotTerminal(f"job {job.job_id} is not terminal ({job.overall})")
    index_a = {job.matrix_index: job for job in jobs_a}
    index_b = {job.matrix_index: job for job in jobs_b}
    if len(index_a) != len(jobs_a) or len(index_b) != len(jobs_b):
        raise MatrixShapeMismatch("duplicate matrix_index within a build")
    if set(index_a) != set(index_b):
        raise MatrixShapeMismatch(
            f"builds have different matrix shapes: {sorted(index_a)} vs {sorted(index_b)}"
        )

    pairs = []
    all_identical = True
    for matrix_index in sorted(index_a):
        job_a = index_a[matrix_index]
        job_b = index_b[matrix_index]
        paths_a = {e.path: e for e in job_a.manifest.entries}
        paths_b = {e.path: e for e in job_b.manifest.entries}
        verdicts = []
        for path in sorted(set(paths_a) | set(paths_b)):
            in_a = paths_a.get(path)
            in_b = paths_b.get(path)
            if in_a and in_b:
                if in_a.digest == in_b.digest:
                    verdicts.append(
                        PathVerdict(path, "identical", in_a.digest, in_b.digest)
                    )
                else:
                    verdicts.append(PathVerdict(path, "differs", in_a.digest, in_b.digest))
                    all_identical = False
            elif in_a:
                verdicts.append(PathVerdict(path, "only_in_a", digest_a=in_a.digest))
                all_identical = False
            else:
                assert in_b is not None
                verdicts.append(PathVerdict(path, "only_in_b", digest_b=in_b.digest))
                all_identical = False
        pairs.append(
            JobComparison(
                matrix_index=matrix_index,
                job_a=job_a.job_id,
                job_b=job_b.job_id,
                path_verdicts=tuple(verdicts),
                fingerprint_diffs=_diff_fingerprints(job_a.fingerprint, job_b.fingerprint),
            )
        )
    return ReproReport(
        pairs=tuple(pairs), verdict="reproduced" if all_identical else "diverged"
    )
