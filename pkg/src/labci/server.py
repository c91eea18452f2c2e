"""Coordination server: ingest snapshot events, expand builds into jobs,
hand jobs to runners atomically under a global parallelism cap, receive
ordered log chunks and artifacts, and expose unauthenticated read views.

All mutable coordination state lives behind one lock, which makes claims
linearizable and log appends serialized by construction. Durable facts
(blobs, logs, ledger) live in the store; the in-memory index is rebuilt
from the ledger and blob store on startup.
"""

from __future__ import annotations

import base64
import json
import os
import re
import secrets
import threading
import time
from dataclasses import dataclass, field as dataclass_field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import unquote

from .config import (
    ConfigError,
    JobSpec,
    expand_matrix,
    parse_config,
    CONFIG_FILENAME,
)
from .pipeline import (
    IllegalTransition,
    JobEvent,
    JobResult,
    JobState,
    TERMINAL_STATES,
    advance,
    utc_now_rfc3339,
)
from .store import (
    ArtifactEntry,
    ArtifactManifest,
    CompareJob,
    LedgerEntry,
    PathRejected,
    SnapshotNotFound,
    Store,
    canonical_json,
    sha256_hex,
    validate_relative_path,
)

DEFAULT_ADDR = "127.0.0.1:8975"
DEFAULT_PARALLEL_CAP = 4
DEFAULT_HEARTBEAT_INTERVAL_S = 10.0
HEARTBEAT_MISSES = 3

ACTIVE_STATES = (JobState.CLAIMED, JobState.RUNNING)


class ServerError(Exception):
    code = "server_error"
    http_status = 500


class AuthFailure(ServerError):
    code = "auth_failure"
    http_status = 401


class NotFound(ServerError):
    code = "not_found"
    http_status = 404


class UnknownCommit(NotFound):
    code = "unknown_commit"


class EmptyStagePlan(ServerError):
    code = "empty_stage_plan"
    http_status = 400


class OutOfOrderChunk(ServerError):
    code = "out_of_order_chunk"
    http_status = 409


class JobNotRunning(ServerError):
    code = "job_not_running"
    http_status = 409


@dataclass
class ServerConfig:
    data_dir: Path
    parallel_cap: int = DEFAULT_PARALLEL_CAP
    heartbeat_interval_s: float = DEFAULT_HEARTBEAT_INTERVAL_S


@dataclass
class RunnerRecord:
    runner_id: str
    token: str
    kind: str
    capabilities: dict


@dataclass
class _Job:
    job_id: int
    repo_id: str
    build_id: int
    commit_id: str
    matrix_index: int
    spec: JobSpec | None
    state: JobState = JobState.QUEUED
    assigned_runner: str | None = None
    cancel_requested: bool = False
    next_seq: int = 0
    log_committed: int = 0
    uploaded: dict[str, ArtifactEntry] = dataclass_field(default_factory=dict)
    manifest: ArtifactManifest | None = None
    fingerprint: dict | None = None
    result: JobResult | None = None
    completed_at: str | None = None
    last_heartbeat: float = 0.0


@dataclass
class _Build:
    repo_id: str
    build_id: int
    commit_id: str
    created_at: str
    created_seq: int
    job_ids: list[int] = dataclass_field(default_factory=list)
    config_error: str | None = None


def derive_build_status(job_states: list[JobState], config_error: bool) -> str:
    """Build status is a pure function of its jobs' states; any failed job
    dominates timed_out, which dominates canceled."""
    if config_error:
        return "config_error"
    if not job_states:
        return "pending"
    if all(state is JobState.QUEUED for state in job_states):
        return "pending"
    if any(state not in TERMINAL_STATES for state in job_states):
        return "running"
    if any(state is JobState.FAILED for state in job_states):
        return "failed"
    if any(state is JobState.TIMED_OUT for state in job_states):
        return "timed_out"
    if any(state is JobState.CANCELED for state in job_states):
        return "canceled"
    return "succeeded"


class Coordinator:
    """All server-side coordination logic, independent of HTTP."""

    def __init__(self, config: ServerConfig) -> None:
        self.config = config
        self.store = Store(config.data_dir)
        self._lock = threading.RLock()
        self._builds: dict[int, _Build] = {}
        self._jobs: dict[int, _Job] = {}
        self._runners_by_token: dict[str, RunnerRecord] = {}
        self._event_index: dict[str, int] = {}  # event_id -> build_id
        self._next_build_id = 1
        self._next_job_id = 1
        self._next_runner = 1
        self._build_seq = 0
        self.peak_active = 0
        self._rebuild_from_ledger()

    # -- startup recovery ---------------------------------------------------

    def _rebuild_from_ledger(self) -> None:
        for entry in self.store.ledger.entries():
            build = self._builds.get(entry.build_id)
            if build is None:
                self._build_seq += 1
                build = _Build(
                    repo_id=entry.repo_id,
                    build_id=entry.build_id,
                    commit_id=entry.commit_id,
                    created_at=entry.completed_at,
                    created_seq=self._build_seq,
                )
                self._builds[entry.build_id] = build
            manifest = ArtifactManifest.from_dict(
                json.loads(self.store.blobs.get(entry.artifact_manifest_digest))
            )
            fingerprint = None
            if entry.fingerprint_digest:
                fingerprint = json.loads(self.store.blobs.get(entry.fingerprint_digest))
            log_path = self.store.log_path(entry.job_id)
            job = _Job(
                job_id=entry.job_id,
                repo_id=entry.repo_id,
                build_id=entry.build_id,
                commit_id=entry.commit_id,
                matrix_index=entry.matrix_index,
                spec=None,
                state=JobState(entry.overall),
                manifest=manifest,
                fingerprint=fingerprint,
                completed_at=entry.completed_at,
                log_committed=log_path.stat().st_size if log_path.exists() else 0,
            )
            job.uploaded = {e.path: e for e in manifest.entries}
            self._jobs[entry.job_id] = job
            build.job_ids.append(entry.job_id)
            self._next_build_id = max(self._next_build_id, entry.build_id + 1)
            self._next_job_id = max(self._next_job_id, entry.job_id + 1)

    # -- build creation -----------------------------------------------------

    def _read_pipeline_config(self, commit_id: str):
        manifest = self.store.snapshot_manifest(commit_id)
        for entry in manifest.entries:
            if entry.path == CONFIG_FILENAME:
                text = self.store.blobs.get(entry.digest).decode("utf-8")
                return parse_config(text)
        raise ConfigError(f"snapshot has no {CONFIG_FILENAME}")

    def _create_build(
        self,
        repo_id: str,
        commit_id: str,
        only_stages: list[str] | None = None,
    ) -> _Build:
        try:
            cfg = self._read_pipeline_config(commit_id)
            specs = expand_matrix(cfg)
        except ConfigError as exc:
            self._build_seq += 1
            build = _Build(
                repo_id=repo_id,
                build_id=self._next_build_id,
                commit_id=commit_id,
                created_at=utc_now_rfc3339(),
                created_seq=self._build_seq,
                config_error=str(exc),
            )
            self._next_build_id += 1
            self._builds[build.build_id] = build
            return build

        if only_stages is not None:
            wanted = {stage for stage in only_stages if stage != "info"}
            filtered = []
            for spec in specs:
                plan = tuple(
                    (stage, commands) for stage, commands in spec.stage_plan if stage in wanted
                )
                if not plan:
                    raise EmptyStagePlan(
                        f"stage filter {sorted(wanted)} leaves nothing to run"
                    )
                filtered.append(
                    JobSpec(
                        env=spec.env,
                        stage_plan=plan,
                        artifacts=spec.artifacts,
                        timeout_minutes=spec.timeout_minutes,
                        matrix_index=spec.matrix_index,
                    )
                )
            specs = filtered

        self._build_seq += 1
        build = _Build(
            repo_id=repo_id,
            build_id=self._next_build_id,
            commit_id=commit_id,
            created_at=utc_now_rfc3339(),
            created_seq=self._build_seq,
        )
        self._next_build_id += 1
        self._builds[build.build_id] = build
        for spec in specs:
            job = _Job(
                job_id=self._next_job_id,
                repo_id=repo_id,
                build_id=build.build_id,
                commit_id=commit_id,
                matrix_index=spec.matrix_index,
                spec=spec,
            )
            self._next_job_id += 1
            self._jobs[job.job_id] = job
            build.job_ids.append(job.job_id)
        return build

    def _resolve_snapshot(self, commit_id: str, snapshot_ref: str | None) -> None:
        if self.store.has_snapshot(commit_id):
            return
        if snapshot_ref:
            ref = Path(snapshot_ref)
            if ref.exists():
                _, imported = self.store.import_snapshot(ref)
                if imported == commit_id:
                    return
                raise SnapshotNotFound(
                    f"snapshot at {snapshot_ref} has digest {imported}, not {commit_id}"
                )
        raise SnapshotNotFound(commit_id)

    def ingest_push(
        self, repo_id: str, commit_id: str, snapshot_ref: str | None, event_id: str
    ) -> dict:
        """Create a build for a source-snapshot event; idempotent on event_id."""
        with self._lock:
            existing = self._event_index.get(event_id)
            if existing is not None:
                return self.get_build(existing)
            self._resolve_snapshot(commit_id, snapshot_ref)
            build = self._create_build(repo_id, commit_id)
            self._event_index[event_id] = build.build_id
            return self._build_view(build)

    def trigger_build(
        self, repo_id: str, commit_id: str, only_stages: list[str] | None = None
    ) -> dict:
        """Human-initiated build of an already-stored snapshot."""
        with self._lock:
            if not self.store.has_snapshot(commit_id):
                raise UnknownCommit(commit_id)
            build = self._create_build(repo_id, commit_id, only_stages=only_stages)
            return self._build_view(build)

    # -- runner protocol ----------------------------------------------------

    def register_runner(self, kind: str, capabilities: dict | None) -> tuple[str, str]:
        with self._lock:
            runner_id = f"runner-{self._next_runner}"
            self._next_runner += 1
            token = secrets.token_hex(16)
            self._runners_by_token[token] = RunnerRecord(
                runner_id=runner_id,
                token=token,
                kind=kind,
                capabilities=capabilities or {},
            )
            return runner_id, token

    def _auth(self, token: str | None) -> RunnerRecord:
        runner = self._runners_by_token.get(token or "")
        if runner is None:
            raise AuthFailure("unknown runner token")
        return runner

    def _owned_job(self, runner: RunnerRecord, job_id: int) -> _Job:
        job = self._jobs.get(job_id)
        if job is None:
            raise NotFound(f"no such job: {job_id}")
        if job.assigned_runner != runner.runner_id:
            raise AuthFailure(f"job {job_id} is not assigned to {runner.runner_id}")
        return job

    def active_job_count(self) -> int:
        with self._lock:
            return sum(1 for job in self._jobs.values() if job.state in ACTIVE_STATES)

    def claim_job(self, token: str, capabilities: dict | None = None) -> dict | None:
        """Atomically hand the oldest eligible queued job to the caller.

        A job is returned to exactly one caller ever; None when nothing is
        eligible or starting a job would exceed the global parallel cap.
        """
        with self._lock:
            runner = self._auth(token)
            caps = capabilities if capabilities else runner.capabilities
            runner_os = caps.get("os", "linux")
            active = sum(1 for job in self._jobs.values() if job.state in ACTIVE_STATES)
            if active >= self.config.parallel_cap:
                return None
            queued = [
                job
                for job in self._jobs.values()
                if job.state is JobState.QUEUED
                and job.spec is not None
                and job.spec.env.os == runner_os
            ]
            if not queued:
                return None
            queued.sort(key=lambda job: (self._builds[job.build_id].created_seq, job.matrix_index))
            job = queued[0]
            job.state = advance(job.state, JobEvent.CLAIMED)
            job.assigned_runner = runner.runner_id
            job.last_heartbeat = time.monotonic()
            self.peak_active = max(self.peak_active, active + 1)
            return self._job_claim_view(job)

    def append_log(self, token: str, job_id: int, seq: int, data: bytes) -> int:
        """Apply one log chunk in strict sequence order; duplicates ack'd
        without re-applying, gaps rejected so the runner retries."""
        with self._lock:
            runner = self._auth(token)
            job = self._owned_job(runner, job_id)
            if job.state not in ACTIVE_STATES:
                raise JobNotRunning(f"job {job_id} is {job.state.value}")
            if job.state is JobState.CLAIMED:
                job.state = advance(job.state, JobEvent.STARTED)
            job.last_heartbeat = time.monotonic()
            if seq < job.next_seq:
                return job.log_committed
            if seq > job.next_seq:
                raise OutOfOrderChunk(f"expected seq {job.next_seq}, got {seq}")
            with open(self.store.log_path(job_id), "ab") as handle:
                handle.write(data)
                handle.flush()
            job.next_seq += 1
            job.log_committed += len(data)
            return job.log_committed

    def upload_artifact(self, token: str, job_id: int, path: str, data: bytes) -> str:
        with self._lock:
            runner = self._auth(token)
            job = self._owned_job(runner, job_id)
            if job.state not in ACTIVE_STATES:
                raise JobNotRunning(f"job {job_id} is {job.state.value}")
            clean = unquote(path)
            validate_relative_path(clean)
            digest = self.store.blobs.put(data)
            job.uploaded[clean] = ArtifactEntry(path=clean, size=len(data), digest=digest)
            return digest

    def heartbeat(self, token: str, job_id: int) -> bool:
        with self._lock:
            runner = self._auth(token)
            job = self._owned_job(runner, job_id)
            if job.state in ACTIVE_STATES:
                job.last_heartbeat = time.monotonic()
            return job.cancel_requested

    def _finalize_job(
        self,
        job: _Job,
        overall: JobState,
        result: JobResult | None,
        note: str | None = None,
    ) -> None:
        """Terminal bookkeeping shared by complete/cancel/reap: fsync the log,
        persist fingerprint and manifest blobs, append the ledger entry."""
        log_path = self.store.log_path(job.job_id)
        if note:
            line = f"{utc_now_rfc3339()} [internal] {note}\n".encode("utf-8")
            with open(log_path, "ab") as handle:
                handle.write(line)
            job.log_committed += len(line)
        if log_path.exists():
            log_bytes = log_path.read_bytes()
            fd = os.open(log_path, os.O_RDWR)
            try:
                os.fsync(fd)
            finally:
                os.close(fd)
        else:
            log_bytes = b""

        fingerprint_digest = ""
        if result is not None and result.fingerprint is not None:
            job.fingerprint = result.fingerprint.to_dict()
            fingerprint_digest = self.store.blobs.put(canonical_json(job.fingerprint))

        manifest = ArtifactManifest.build(job.job_id, job.uploaded.values())
        manifest_digest = self.store.blobs.put(canonical_json(manifest.to_dict()))

        completed_at = utc_now_rfc3339()
        self.store.ledger.append(
            LedgerEntry(
                repo_id=job.repo_id,
                commit_id=job.commit_id,
                build_id=job.build_id,
                job_id=job.job_id,
                matrix_index=job.matrix_index,
                overall=overall.value,
                fingerprint_digest=fingerprint_digest,
                log_digest=sha256_hex(log_bytes),
                artifact_manifest_digest=manifest_digest,
                completed_at=completed_at,
            )
        )
        job.state = overall
        job.result = result
        job.manifest = manifest
        job.completed_at = completed_at

    def complete_job(self, token: str, job_id: int, result_data: dict) -> None:
        with self._lock:
            runner = self._auth(token)
            job = self._owned_job(runner, job_id)
            result = JobResult.from_dict(result_data)
            overall = advance(job.state, JobEvent.COMPLETED, outcome=JobState(result.overall))
            self._finalize_job(job, overall, result)

    def cancel_build(self, build_id: int) -> dict:
        """Queued jobs die immediately; active jobs get a flag their runner
        observes on the next heartbeat; terminal jobs are untouched."""
        with self._lock:
            build = self._builds.get(build_id)
            if build is None:
                raise NotFound(f"no such build: {build_id}")
            for job_id in build.job_ids:
                job = self._jobs[job_id]
                if job.state is JobState.QUEUED:
                    overall = advance(job.state, JobEvent.CANCEL_REQUESTED)
                    self._finalize_job(job, overall, None, note="canceled before claim")
                elif job.state in ACTIVE_STATES:
                    job.cancel_requested = True
            return self._build_view(build)

    def reap_lost_runners(self, now: float | None = None) -> list[int]:
        """Fail claimed/running jobs whose runner went silent for
        HEARTBEAT_MISSES heartbeat intervals."""
        now = time.monotonic() if now is None else now
        cutoff = self.config.heartbeat_interval_s * HEARTBEAT_MISSES
        reaped = []
        with self._lock:
            for job in self._jobs.values():
                if job.state in ACTIVE_STATES and now - job.last_heartbeat > cutoff:
                    self._finalize_job(
                        job, JobState.FAILED, None, note="runner lost: heartbeats stopped"
                    )
                    reaped.append(job.job_id)
        return reaped

    # -- public reads ---------------------------------------------------------

    def _job_claim_view(self, job: _Job) -> dict:
        assert job.spec is not None
        return {
            "job_id": job.job_id,
            "build_id": job.build_id,
            "repo_id": job.repo_id,
            "commit_id": job.commit_id,
            "matrix_index": job.matrix_index,
            "spec": job.spec.to_dict(),
        }

    def _job_summary(self, job: _Job) -> dict:
        terminal = job.state in TERMINAL_STATES
        return {
            "job_id": job.job_id,
            "matrix_index": job.matrix_index,
            "state": job.state.value,
            "overall": job.state.value if terminal else None,
            "completed_at": job.completed_at,
            "stage_results": (
                [s.to_dict() for s in job.result.stage_results] if job.result else None
            ),
            "artifacts": [
                {"path": e.path, "size": e.size, "digest": e.digest}
                for e in sorted(job.uploaded.values(), key=lambda e: e.path)
            ],
        }

    def _build_view(self, build: _Build) -> dict:
        jobs = [self._jobs[job_id] for job_id in build.job_ids]
        status = derive_build_status([job.state for job in jobs], build.config_error is not None)
        return {
            "build_id": build.build_id,
            "repo_id": build.repo_id,
            "commit_id": build.commit_id,
            "created_at": build.created_at,
            "status": status,
            "config_diagnostics": build.config_error,
            "jobs": [self._job_summary(job) for job in jobs],
        }

    def list_builds(self, repo_id: str) -> list[dict]:
        with self._lock:
            builds = [b for b in self._builds.values() if b.repo_id == repo_id]
            builds.sort(key=lambda b: b.build_id)
            return [self._build_view(b) for b in builds]

    def get_build(self, build_id: int) -> dict:
        with self._lock:
            build = self._builds.get(build_id)
            if build is None:
                raise NotFound(f"no such build: {build_id}")
            return self._build_view(build)

    def get_job_state(self, job_id: int) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFound(f"no such job: {job_id}")
            return self._job_summary(job)

    def get_log(self, job_id: int) -> bytes:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFound(f"no such job: {job_id}")
            committed = job.log_committed
        path = self.store.log_path(job_id)
        if not path.exists():
            return b""
        with open(path, "rb") as handle:
            return handle.read(committed)

    def get_artifact(self, job_id: int, path: str) -> bytes:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFound(f"no such job: {job_id}")
            entry = job.uploaded.get(path)
            if entry is None:
                raise NotFound(f"job {job_id} has no artifact {path!r}")
            digest = entry.digest
        return self.store.blobs.get(digest)

    def get_fingerprint(self, job_id: int) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFound(f"no such job: {job_id}")
            if job.fingerprint is None:
                raise NotFound(f"job {job_id} has no fingerprint")
            return dict(job.fingerprint)

    def get_snapshot_manifest_text(self, commit_id: str) -> str:
        manifest = self.store.snapshot_manifest(commit_id)
        return manifest.canonical_bytes().decode("utf-8")

    def compare_jobs_view(self, build_id: int) -> tuple[str, list[CompareJob]]:
        """(commit_id, CompareJob list) for build comparison."""
        with self._lock:
            build = self._builds.get(build_id)
            if build is None:
                raise NotFound(f"no such build: {build_id}")
            jobs = []
            for job_id in build.job_ids:
                job = self._jobs[job_id]
                manifest = job.manifest or ArtifactManifest.build(job_id, job.uploaded.values())
                jobs.append(
                    CompareJob(
                        matrix_index=job.matrix_index,
                        job_id=job.job_id,
                        overall=job.state.value,
                        manifest=manifest,
                        fingerprint=job.fingerprint,
                    )
                )
            return build.commit_id, jobs


# -- HTTP layer ---------------------------------------------------------------

_ROUTES_POST = [
    (re.compile(r"^/api/v1/events/push$"), "push"),
    (re.compile(r"^/api/v1/builds/trigger$"), "trigger"),
    (re.compile(r"^/api/v1/runners/register$"), "register"),
    (re.compile(r"^/api/v1/jobs/claim$"), "claim"),
    (re.compile(r"^/api/v1/jobs/(\d+)/logs$"), "logs"),
    (re.compile(r"^/api/v1/jobs/(\d+)/artifacts$"), "artifact_upload"),
    (re.compile(r"^/api/v1/jobs/(\d+)/complete$"), "complete"),
    (re.compile(r"^/api/v1/jobs/(\d+)/heartbeat$"), "heartbeat"),
    (re.compile(r"^/api/v1/builds/(\d+)/cancel$"), "cancel"),
]

_ROUTES_GET = [
    (re.compile(r"^/api/v1/repos/([^/]+)/builds$"), "list_builds"),
    (re.compile(r"^/api/v1/builds/(\d+)$"), "get_build"),
    (re.compile(r"^/api/v1/jobs/(\d+)/log$"), "get_log"),
    (re.compile(r"^/api/v1/jobs/(\d+)/artifacts/(.+)$"), "get_artifact"),
    (re.compile(r"^/api/v1/jobs/(\d+)/fingerprint$"), "get_fingerprint"),
    (re.compile(r"^/api/v1/jobs/(\d+)$"), "get_job"),
    (re.compile(r"^/api/v1/snapshots/([0-9a-f]{64})$"), "get_snapshot"),
    (re.compile(r"^/api/v1/blobs/([0-9a-f]{64})$"), "get_blob"),
]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "labci"

    @property
    def coordinator(self) -> Coordinator:
        return self.server.coordinator  # type: ignore[attr-defined]

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib signature
        pass

    def _token(self) -> str | None:
        header = self.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            return header[len("Bearer "):]
        return None

    def _body_json(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ServerError(f"bad JSON body: {exc}") from exc
        if not isinstance(data, dict):
            raise ServerError("JSON body must be an object")
        return data

    def _send(self, status: int, payload: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if payload:
            self.wfile.write(payload)

    def _send_json(self, status: int, obj: object) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"), "application/json")

    def _send_error(self, exc: Exception) -> None:
        if isinstance(exc, (SnapshotNotFound,)):
            status, code = 404, "snapshot_not_found"
        elif isinstance(exc, PathRejected):
            status, code = 400, "path_escapes_workspace"
        elif isinstance(exc, IllegalTransition):
            status, code = 409, "illegal_transition"
        elif isinstance(exc, ServerError):
            status, code = exc.http_status, exc.code
        else:
            status, code = 500, "internal_error"
        self._send_json(status, {"error": code, "message": str(exc)})

    def do_POST(self) -> None:  # noqa: N802 - stdlib naming
        try:
            for pattern, name in _ROUTES_POST:
                match = pattern.match(self.path)
                if match:
                    getattr(self, f"_post_{name}")(*match.groups())
                    return
            self._send_json(404, {"error": "not_found", "message": self.path})
        except Exception as exc:  # noqa: BLE001 - boundary
            self._send_error(exc)

    def do_GET(self) -> None:  # noqa: N802 - stdlib naming
        try:
            for pattern, name in _ROUTES_GET:
                match = pattern.match(self.path)
                if match:
                    getattr(self, f"_get_{name}")(*match.groups())
                    return
            self._send_json(404, {"error": "not_found", "message": self.path})
        except Exception as exc:  # noqa: BLE001 - boundary
            self._send_error(exc)

    # POST handlers

    def _post_push(self) -> None:
        body = self._body_json()
        build = self.coordinator.ingest_push(
            repo_id=body["repo_id"],
            commit_id=body["commit_id"],
            snapshot_ref=body.get("snapshot_ref"),
            event_id=body["event_id"],
        )
        self._send_json(201, build)

    def _post_trigger(self) -> None:
        body = self._body_json()
        build = self.coordinator.trigger_build(
            repo_id=body["repo_id"],
            commit_id=body["commit_id"],
            only_stages=body.get("only_stages"),
        )
        self._send_json(201, build)

    def _post_register(self) -> None:
        body = self._body_json()
        runner_id, token = self.coordinator.register_runner(
            kind=body.get("kind", "selfhosted"),
            capabilities=body.get("capabilities"),
        )
        self._send_json(200, {"runner_id": runner_id, "token": token})

    def _post_claim(self) -> None:
        body = self._body_json()
        job = self.coordinator.claim_job(self._token() or "", body.get("capabilities"))
        if job is None:
            self._send(204, b"", "application/json")
        else:
            self._send_json(200, job)

    def _post_logs(self, job_id: str) -> None:
        body = self._body_json()
        committed = self.coordinator.append_log(
            self._token() or "",
            int(job_id),
            int(body["seq"]),
            base64.b64decode(body["data_base64"]),
        )
        self._send_json(200, {"committed": committed})

    def _post_artifact_upload(self, job_id: str) -> None:
        body = self._body_json()
        digest = self.coordinator.upload_artifact(
            self._token() or "",
            int(job_id),
            body["path"],
            base64.b64decode(body["data_base64"]),
        )
        self._send_json(200, {"digest": digest})

    def _post_complete(self, job_id: str) -> None:
        body = self._body_json()
        self.coordinator.complete_job(self._token() or "", int(job_id), body)
        self._send_json(200, {"ok": True})

    def _post_heartbeat(self, job_id: str) -> None:
        cancel = self.coordinator.heartbeat(self._token() or "", int(job_id))
        self._send_json(200, {"cancel_requested": cancel})

    def _post_cancel(self, build_id: str) -> None:
        build = self.coordinator.cancel_build(int(build_id))
        self._send_json(200, build)

    # GET handlers

    def _get_list_builds(self, repo_id: str) -> None:
        self._send_json(200, {"builds": self.coordinator.list_builds(unquote(repo_id))})

    def _get_get_build(self, build_id: str) -> None:
        self._send_json(200, self.coordinator.get_build(int(build_id)))

    def _get_get_job(self, job_id: str) -> None:
        self._send_json(200, self.coordinator.get_job_state(int(job_id)))

    def _get_get_log(self, job_id: str) -> None:
        self._send(200, self.coordinator.get_log(int(job_id)), "text/plain; charset=utf-8")

    def _get_get_artifact(self, job_id: str, path: str) -> None:
        data = self.coordinator.get_artifact(int(job_id), unquote(path))
        self._send(200, data, "application/octet-stream")

    def _get_get_fingerprint(self, job_id: str) -> None:
        self._send_json(200, self.coordinator.get_fingerprint(int(job_id)))

    def _get_get_snapshot(self, commit_id: str) -> None:
        text = self.coordinator.get_snapshot_manifest_text(commit_id)
        self._send(200, text.encode("utf-8"), "text/plain; charset=utf-8")

    def _get_get_blob(self, digest: str) -> None:
        self._send(200, self.coordinator.store.blobs.get(digest), "application/octet-stream")


class LabCIServer:
    """HTTP front plus the heartbeat reaper; owns nothing the Coordinator
    does not already persist."""

    def __init__(self, coordinator: Coordinator, host: str = "127.0.0.1", port: int = 8975) -> None:
        self.coordinator = coordinator
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.coordinator = coordinator  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None
        self._reaper: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _reap_loop(self) -> None:
        interval = max(0.05, self.coordinator.config.heartbeat_interval_s / 2)
        while not self._stop.wait(interval):
            self.coordinator.reap_lost_runners()

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        self._reaper = threading.Thread(target=self._reap_loop, daemon=True)
        self._reaper.start()

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._reaper is not None:
            self._reaper.join(timeout=5)

    def serve_forever(self) -> None:
        self._reaper = threading.Thread(target=self._reap_loop, daemon=True)
        self._reaper.start()
        try:
            self.httpd.serve_forever()
        finally:
            self._stop.set()
            self.httpd.server_close()
