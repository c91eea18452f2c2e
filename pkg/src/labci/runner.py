"""Runner agent: registers with the server, claims jobs, materializes the
source snapshot into a fresh workspace, executes the pipeline, streams the
log as sequenced chunks, and uploads artifacts and the result.

Two execution backends ship: local host processes, and a batch bridge that
submits each stage to a (simulated) cluster scheduler and relays its output,
modeling an HPC head node. The runner always dials out, so it works from
behind NAT or a firewall.
"""

from __future__ import annotations

import base64
import platform
import shutil
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import httpx

from .config import JobSpec
from .pipeline import (
    ExecutorBackend,
    JobContext,
    JobLog,
    JobResult,
    LocalBackend,
    MachineFacts,
    StageOutcome,
    StageResult,
    run_job,
    utc_now_rfc3339,
)
from .store import ArtifactManifest, SnapshotManifest, sha256_hex, snapshot_of_tree

DEFAULT_POLL_INTERVAL_S = 2.0
DEFAULT_HEARTBEAT_INTERVAL_S = 10.0
BACKOFF_CAP_S = 60.0
RETAINED_WORKSPACE_CAP = 5


class RunnerError(Exception):
    pass


class AuthFailure(RunnerError):
    """Server rejected our token; the runner loop terminates."""


class TransportError(RunnerError):
    """Transient network failure after retries; callers back off and retry."""


class FetchFailure(RunnerError):
    pass


class DigestMismatch(RunnerError):
    """Materialized workspace does not hash to the expected commit id."""


class SubmissionRefused(RunnerError):
    pass


class BatchLost(RunnerError):
    """The scheduler no longer knows the batch job."""


@dataclass
class RunnerConfig:
    server_url: str
    token: str
    kind: str = "selfhosted"  # cloud | selfhosted
    backend: str = "local"  # local | batch_bridge
    poll_interval_s: float = DEFAULT_POLL_INTERVAL_S
    heartbeat_interval_s: float = DEFAULT_HEARTBEAT_INTERVAL_S
    workspace_root: Path = Path("workspaces")
    os_capability: str = ""
    timeout_scale: float = 1.0  # test override knob for job timeouts

    def __post_init__(self) -> None:
        if not self.os_capability:
            self.os_capability = detect_os()
        self.workspace_root = Path(self.workspace_root)
        if self.poll_interval_s > self.heartbeat_interval_s:
            raise ValueError("poll_interval must not exceed heartbeat_interval")


def detect_os() -> str:
    return {"Linux": "linux", "Darwin": "macos", "Windows": "windows"}.get(
        platform.system(), "linux"
    )


class ServerClient:
    """Thin HTTP client for the coordination API with bounded retries."""

    def __init__(self, server_url: str, token: str = "", max_retries: int = 5) -> None:
        self.server_url = server_url.rstrip("/")
        self.token = token
        self.max_retries = max_retries
        self._client = httpx.Client(timeout=30.0)

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, *, json_body: dict | None = None) -> httpx.Response:
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        url = self.server_url + path
        delay = 0.2
        for attempt in range(self.max_retries + 1):
            try:
                response = self._client.request(method, url, json=json_body, headers=headers)
            except httpx.TransportError as exc:
                if attempt == self.max_retries:
                    raise TransportError(f"{method} {path}: {exc}") from exc
                time.sleep(delay)
                delay = min(delay * 2, BACKOFF_CAP_S)
                continue
            if response.status_code == 401:
                raise AuthFailure(response.text)
            return response
        raise TransportError(f"{method} {path}: retries exhausted")

    @staticmethod
    def _error_message(response: httpx.Response) -> str:
        try:
            body = response.json()
            return f"{body.get('error')}: {body.get('message')}"
        except ValueError:
            return response.text

    def register(self, kind: str, capabilities: dict) -> tuple[str, str]:
        response = self._request(
            "POST", "/api/v1/runners/register",
            json_body={"kind": kind, "capabilities": capabilities},
        )
        data = response.json()
        return data["runner_id"], data["token"]

    def push_event(
        self, repo_id: str, commit_id: str, snapshot_ref: str, event_id: str
    ) -> dict:
        response = self._request(
            "POST",
            "/api/v1/events/push",
            json_body={
                "repo_id": repo_id,
                "commit_id": commit_id,
                "snapshot_ref": snapshot_ref,
                "event_id": event_id,
            },
        )
        if response.status_code != 201:
            raise RunnerError(self._error_message(response))
        return response.json()

    def trigger_build(
        self, repo_id: str, commit_id: str, only_stages: list[str] | None = None
    ) -> dict:
        response = self._request(
            "POST",
            "/api/v1/builds/trigger",
            json_body={
                "repo_id": repo_id,
                "commit_id": commit_id,
                "only_stages": only_stages,
            },
        )
        if response.status_code != 201:
            raise RunnerError(self._error_message(response))
        return response.json()

    def cancel_build(self, build_id: int) -> dict:
        response = self._request("POST", f"/api/v1/builds/{build_id}/cancel")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()

    def list_builds(self, repo_id: str) -> list[dict]:
        response = self._request("GET", f"/api/v1/repos/{repo_id}/builds")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()["builds"]

    def claim(self, capabilities: dict) -> dict | None:
        response = self._request(
            "POST", "/api/v1/jobs/claim", json_body={"capabilities": capabilities}
        )
        if response.status_code == 204:
            return None
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()

    def append_log(self, job_id: int, seq: int, data: bytes) -> None:
        response = self._request(
            "POST",
            f"/api/v1/jobs/{job_id}/logs",
            json_body={"seq": seq, "data_base64": base64.b64encode(data).decode("ascii")},
        )
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))

    def upload_artifact(self, job_id: int, path: str, data: bytes) -> str:
        response = self._request(
            "POST",
            f"/api/v1/jobs/{job_id}/artifacts",
            json_body={"path": path, "data_base64": base64.b64encode(data).decode("ascii")},
        )
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()["digest"]

    def complete(self, job_id: int, result: dict) -> bool:
        """False when the server no longer accepts the result (job already
        terminal, e.g. reaped as runner_lost)."""
        response = self._request("POST", f"/api/v1/jobs/{job_id}/complete", json_body=result)
        if response.status_code == 409:
            return False
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return True

    def heartbeat(self, job_id: int) -> bool:
        response = self._request("POST", f"/api/v1/jobs/{job_id}/heartbeat")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return bool(response.json().get("cancel_requested"))

    def fetch_snapshot_manifest(self, commit_id: str) -> str:
        response = self._request("GET", f"/api/v1/snapshots/{commit_id}")
        if response.status_code != 200:
            raise FetchFailure(self._error_message(response))
        return response.text

    def fetch_blob(self, digest: str) -> bytes:
        response = self._request("GET", f"/api/v1/blobs/{digest}")
        if response.status_code != 200:
            raise FetchFailure(self._error_message(response))
        data = response.content
        if sha256_hex(data) != digest:
            raise FetchFailure(f"blob {digest} arrived corrupted")
        return data

    def get_build(self, build_id: int) -> dict:
        response = self._request("GET", f"/api/v1/builds/{build_id}")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()

    def get_job(self, job_id: int) -> dict:
        response = self._request("GET", f"/api/v1/jobs/{job_id}")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()

    def get_log(self, job_id: int) -> bytes:
        response = self._request("GET", f"/api/v1/jobs/{job_id}/log")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.content

    def get_fingerprint(self, job_id: int) -> dict:
        response = self._request("GET", f"/api/v1/jobs/{job_id}/fingerprint")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.json()

    def get_artifact(self, job_id: int, path: str) -> bytes:
        response = self._request("GET", f"/api/v1/jobs/{job_id}/artifacts/{path}")
        if response.status_code != 200:
            raise RunnerError(self._error_message(response))
        return response.content


@dataclass
class Workspace:
    path: Path
    commit_id: str


def prepare_workspace(
    client: ServerClient, commit_id: str, workspace_root: Path, job_id: int
) -> Workspace:
    """Materialize the snapshot into a fresh directory and re-verify that the
    written tree hashes back to the commit id before any stage runs."""
    workspace_root.mkdir(parents=True, exist_ok=True)
    path = workspace_root / f"job-{job_id}-{uuid.uuid4().hex[:8]}"
    path.mkdir()
    manifest = SnapshotManifest.parse(client.fetch_snapshot_manifest(commit_id))
    for entry in manifest.entries:
        dest = path / entry.path
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(client.fetch_blob(entry.digest))
        dest.chmod(0o755 if entry.mode == "100755" else 0o644)
    actual = snapshot_of_tree(path).digest()
    if actual != commit_id:
        shutil.rmtree(path, ignore_errors=True)
        raise DigestMismatch(f"workspace hashed to {actual}, expected {commit_id}")
    return Workspace(path=path, commit_id=commit_id)


# -- simulated batch scheduler --------------------------------------------------


@dataclass
class SchedulerConfig:
    """Deterministic in-process stand-in for a cluster scheduler."""

    tick_ms: int = 20  # sleep between polls
    capacity: int = 4  # batches allowed in the running phase
    delay_ticks: int = 3  # poll on which an admitted batch completes
    drop_after: int | None = None  # lose the batch after this many polls

    @staticmethod
    def from_file(path: str | Path) -> "SchedulerConfig":
        import json

        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return SchedulerConfig(
            tick_ms=int(data.get("tick_ms", 20)),
            capacity=int(data.get("capacity", 4)),
            delay_ticks=int(data.get("delay_ticks", 3)),
            drop_after=data.get("drop_after"),
        )


@dataclass
class _Batch:
    commands: tuple[str, ...]
    cwd: Path
    env: dict[str, str]
    phase: str = "pending"
    polls: int = 0
    done_at: int = 0
    exit_code: int = 0
    output: tuple[str, ...] = ()


class SimulatedScheduler:
    """Poll-driven batch scheduler: submissions advance only when polled, so
    the observed pending -> running -> done progression is deterministic."""

    def __init__(self, config: SchedulerConfig | None = None) -> None:
        self.config = config or SchedulerConfig()
        self._batches: dict[int, _Batch] = {}
        self._next_id = 1
        self._lock = threading.Lock()

    def submit(self, commands: tuple[str, ...], cwd: Path, env: dict[str, str]) -> int:
        with self._lock:
            batch_id = self._next_id
            self._next_id += 1
            self._batches[batch_id] = _Batch(commands=commands, cwd=cwd, env=env)
            return batch_id

    def _running_count(self) -> int:
        return sum(1 for batch in self._batches.values() if batch.phase == "running")

    def poll(self, batch_id: int) -> str:
        with self._lock:
            batch = self._batches.get(batch_id)
            if batch is None:
                raise BatchLost(f"batch {batch_id} is unknown to the scheduler")
            batch.polls += 1
            drop_after = self.config.drop_after
            if drop_after is not None and batch.polls >= drop_after and batch.phase != "done":
                del self._batches[batch_id]
                raise BatchLost(f"scheduler dropped batch {batch_id}")
            if batch.phase == "pending":
                if batch.polls >= 2 and self._running_count() < self.config.capacity:
                    batch.phase = "running"
                    batch.done_at = batch.polls + max(self.config.delay_ticks - 2, 1)
                    return "running"
                return "pending"
            if batch.phase == "running":
                if batch.polls >= batch.done_at:
                    self._execute(batch)
                    batch.phase = "done"
                    return "done"
                return "running"
            return "done"

    def _execute(self, batch: _Batch) -> None:
        lines: list[str] = []
        exit_code = 0
        for command in batch.commands:
            proc = subprocess.run(
                command,
                shell=True,
                cwd=str(batch.cwd),
                env=batch.env,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
            )
            lines.extend(
                raw.decode("utf-8", errors="replace")
                for raw in proc.stdout.splitlines()
            )
            if proc.returncode != 0:
                exit_code = proc.returncode
                break
        batch.exit_code = exit_code
        batch.output = tuple(lines)

    def fetch_output(self, batch_id: int) -> tuple[tuple[str, ...], int]:
        with self._lock:
            batch = self._batches.get(batch_id)
            if batch is None or batch.phase != "done":
                raise BatchLost(f"batch {batch_id} has no output")
            return batch.output, batch.exit_code

    def forget(self, batch_id: int) -> None:
        with self._lock:
            self._batches.pop(batch_id, None)


class BatchBridgeBackend(ExecutorBackend):
    """Submits each stage as one batch job and relays its ordered output, so
    the server-side record is indistinguishable in shape from a local run."""

    name = "batch_bridge"

    def __init__(
        self,
        scheduler: SimulatedScheduler | None = None,
        kind: str = "selfhosted",
        capabilities: dict | None = None,
    ) -> None:
        self.scheduler = scheduler or SimulatedScheduler()
        self.kind = kind
        self.capabilities = capabilities or {"os": detect_os(), "tags": ["batch"]}
        self._head_node = LocalBackend(kind=kind)

    def machine_facts(self) -> MachineFacts:
        return self._head_node.machine_facts()

    def probe_toolchain(self, language: str) -> str | None:
        return self._head_node.probe_toolchain(language)

    def run_stage(
        self,
        stage: str,
        commands: tuple[str, ...],
        *,
        cwd: Path,
        env: dict[str, str],
        deadline: float,
        cancel_event: threading.Event | None,
        on_line,
    ) -> StageOutcome:
        try:
            batch_id = self.scheduler.submit(commands, cwd, env)
        except SubmissionRefused as exc:
            return StageOutcome(exit_code=None, note=f"stage failed: {exc}")
        tick_s = self.scheduler.config.tick_ms / 1000.0
        while True:
            if time.monotonic() >= deadline:
                self.scheduler.forget(batch_id)
                return StageOutcome(timed_out=True)
            if cancel_event is not None and cancel_event.is_set():
                self.scheduler.forget(batch_id)
                return StageOutcome(canceled=True)
            try:
                state = self.scheduler.poll(batch_id)
            except BatchLost:
                return StageOutcome(exit_code=None, note="stage failed: batch_lost")
            if state == "done":
                break
            time.sleep(tick_s)
        lines, exit_code = self.scheduler.fetch_output(batch_id)
        for line in lines:
            on_line(line)
        return StageOutcome(exit_code=exit_code)


def make_backend(config: RunnerConfig, scheduler: SimulatedScheduler | None = None) -> ExecutorBackend:
    if config.backend == "batch_bridge":
        return BatchBridgeBackend(scheduler=scheduler, kind=config.kind)
    return LocalBackend(kind=config.kind, capabilities={"os": config.os_capability})


class _LogStreamer:
    """Single writer turning log bytes into strictly sequenced chunks."""

    def __init__(self, client: ServerClient, job_id: int) -> None:
        self._client = client
        self._job_id = job_id
        self._seq = 0

    def send(self, data: bytes) -> None:
        if not data:
            return
        self._client.append_log(self._job_id, self._seq, data)
        self._seq += 1


class _HeartbeatLoop:
    """Heartbeats while a stage runs; sets the cancel event when the server
    asks for cancellation."""

    def __init__(self, client: ServerClient, job_id: int, interval_s: float) -> None:
        self._client = client
        self._job_id = job_id
        self._interval_s = interval_s
        self._stop = threading.Event()
        self.cancel_event = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self) -> None:
        while not self._stop.wait(self._interval_s):
            try:
                if self._client.heartbeat(self._job_id):
                    self.cancel_event.set()
            except RunnerError:
                pass  # transient; the next beat retries

    def start(self) -> "_HeartbeatLoop":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


def _internal_failure_result(job_id: int, note: str) -> JobResult:
    now = utc_now_rfc3339()
    return JobResult(
        stage_results=(
            StageResult(
                stage="internal",
                status="failed",
                exit_code=None,
                started_at=now,
                ended_at=now,
                log_offset=0,
                log_length=0,
            ),
        ),
        overall="failed",
        fingerprint=None,
        artifacts=ArtifactManifest.build(job_id, []),
        peak_note=note,
    )


class Runner:
    """Single-job-at-a-time agent loop; scale out by running more processes."""

    def __init__(
        self,
        client: ServerClient,
        config: RunnerConfig,
        backend: ExecutorBackend | None = None,
    ) -> None:
        self.client = client
        self.config = config
        self.backend = backend or make_backend(config)
        self._retained: list[Path] = []

    def run_once(self) -> bool:
        """Claim and fully process at most one job; False when none claimed."""
        claimed = self.client.claim({"os": self.config.os_capability})
        if claimed is None:
            return False
        job_id = int(claimed["job_id"])
        spec = JobSpec.from_dict(claimed["spec"])
        ctx = JobContext(
            job_id=job_id,
            build_id=int(claimed["build_id"]),
            commit_id=claimed["commit_id"],
            matrix_index=int(claimed["matrix_index"]),
        )
        streamer = _LogStreamer(self.client, job_id)

        try:
            workspace = prepare_workspace(
                self.client, claimed["commit_id"], self.config.workspace_root, job_id
            )
        except (DigestMismatch, FetchFailure) as exc:
            line = f"{utc_now_rfc3339()} [internal] workspace preparation failed: {exc}\n"
            streamer.send(line.encode("utf-8"))
            self.client.complete(job_id, _internal_failure_result(job_id, str(exc)).to_dict())
            return True

        heartbeats = _HeartbeatLoop(
            self.client, job_id, self.config.heartbeat_interval_s
        ).start()
        log = JobLog(on_chunk=streamer.send)
        timeout_override = None
        if self.config.timeout_scale != 1.0:
            timeout_override = spec.timeout_minutes * 60.0 * self.config.timeout_scale
        result: JobResult | None = None
        try:
            result = run_job(
                spec,
                self.backend,
                workspace.path,
                ctx,
                log=log,
                timeout_override_s=timeout_override,
                cancel_event=heartbeats.cancel_event,
            )
            for entry in result.artifacts.entries:
                data = (workspace.path / entry.path).read_bytes()
                self.client.upload_artifact(job_id, entry.path, data)
            self.client.complete(job_id, result.to_dict())
        finally:
            heartbeats.stop()
        self._cleanup_workspace(
            workspace.path, succeeded=result is not None and result.overall == "succeeded"
        )
        return True

    def _cleanup_workspace(self, path: Path, succeeded: bool) -> None:
        """Delete on success; retain failures for debugging, capped."""
        if succeeded:
            shutil.rmtree(path, ignore_errors=True)
            return
        self._retained.append(path)
        while len(self._retained) > RETAINED_WORKSPACE_CAP:
            oldest = self._retained.pop(0)
            shutil.rmtree(oldest, ignore_errors=True)

    def run_forever(self, stop_event: threading.Event | None = None) -> None:
        """The attach loop: claim, execute, repeat; transient network errors
        back off exponentially; an auth failure terminates the loop."""
        stop_event = stop_event or threading.Event()
        backoff = self.config.poll_interval_s
        while not stop_event.is_set():
            try:
                claimed = self.run_once()
            except TransportError:
                stop_event.wait(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
                continue
            backoff = self.config.poll_interval_s
            if not claimed:
                stop_event.wait(self.config.poll_interval_s)
