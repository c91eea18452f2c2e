"""Stage-by-stage execution of one job against an executor backend.

A job runs its stages strictly sequentially in the canonical order
[info, install, build, test, deploy, run, report]. The first failure or
timeout skips everything after it. Artifact patterns are evaluated once,
after the last executed stage, so failed experiments still keep partial
outputs. Log lines are bit-exact: `<RFC3339 UTC> [<stage>] <raw line>\\n`.
"""

from __future__ import annotations

import os
import platform
import re
import shutil
import signal
import socket
import subprocess
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable

import psutil

from .config import JobSpec
from .store import ArtifactEntry, ArtifactManifest, sha256_hex, validate_relative_path

TERMINATION_GRACE_S = 5.0
POLL_INTERVAL_S = 0.05


class PipelineError(Exception):
    pass


class BackendUnavailable(PipelineError):
    pass


class WorkspaceMissing(PipelineError):
    pass


class IllegalTransition(PipelineError):
    pass


def utc_now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


class JobLog:
    """Append-only in-memory job log with the bit-exact line format.

    Every appended line is also handed to `on_chunk` (when set) so a caller
    can stream the exact bytes elsewhere; committed bytes never change.
    """

    def __init__(self, on_chunk: Callable[[bytes], None] | None = None) -> None:
        self._buffer = bytearray()
        self._on_chunk = on_chunk

    @property
    def size(self) -> int:
        return len(self._buffer)

    def bytes(self) -> bytes:
        return bytes(self._buffer)

    def write_line(self, stage: str, text: str) -> None:
        line = f"{utc_now_rfc3339()} [{stage}] {text}\n".encode("utf-8", errors="replace")
        self._buffer.extend(line)
        if self._on_chunk is not None:
            self._on_chunk(line)


@dataclass(frozen=True)
class EnvironmentFingerprint:
    """Facts about the machine a job actually ran on."""

    os_name: str
    os_version: str
    cpu_count: int
    mem_total_mb: int
    hostname: str
    runner_kind: str  # cloud | selfhosted
    toolchain_reports: tuple[tuple[str, str], ...] = ()
    captured_at: str = ""

    def to_log_lines(self) -> list[str]:
        lines = [
            f"os_name={self.os_name}",
            f"os_version={self.os_version}",
            f"cpu_count={self.cpu_count}",
            f"mem_total_mb={self.mem_total_mb}",
            f"hostname={self.hostname}",
            f"runner_kind={self.runner_kind}",
            f"captured_at={self.captured_at}",
        ]
        for language, version in self.toolchain_reports:
            lines.append(f"toolchain.{language}={version}")
        return lines

    def to_dict(self) -> dict:
        return {
            "os_name": self.os_name,
            "os_version": self.os_version,
            "cpu_count": self.cpu_count,
            "mem_total_mb": self.mem_total_mb,
            "hostname": self.hostname,
            "runner_kind": self.runner_kind,
            "toolchain_reports": dict(self.toolchain_reports),
            "captured_at": self.captured_at,
        }

    @staticmethod
    def from_dict(data: dict) -> "EnvironmentFingerprint":
        return EnvironmentFingerprint(
            os_name=data["os_name"],
            os_version=data["os_version"],
            cpu_count=int(data["cpu_count"]),
            mem_total_mb=int(data["mem_total_mb"]),
            hostname=data["hostname"],
            runner_kind=data["runner_kind"],
            toolchain_reports=tuple(sorted(data.get("toolchain_reports", {}).items())),
            captured_at=data.get("captured_at", ""),
        )


@dataclass(frozen=True)
class MachineFacts:
    os_name: str
    os_version: str
    cpu_count: int
    mem_total_mb: int
    hostname: str


@dataclass(frozen=True)
class StageOutcome:
    """What the backend reports back for one stage."""

    exit_code: int | None = None
    timed_out: bool = False
    canceled: bool = False
    note: str | None = None


@dataclass(frozen=True)
class StageResult:
    stage: str
    status: str  # succeeded | failed | skipped | timed_out
    exit_code: int | None
    started_at: str
    ended_at: str
    log_offset: int
    log_length: int

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "status": self.status,
            "exit_code": self.exit_code,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "log_offset": self.log_offset,
            "log_length": self.log_length,
        }

    @staticmethod
    def from_dict(data: dict) -> "StageResult":
        return StageResult(
            stage=data["stage"],
            status=data["status"],
            exit_code=data["exit_code"],
            started_at=data["started_at"],
            ended_at=data["ended_at"],
            log_offset=int(data["log_offset"]),
            log_length=int(data["log_length"]),
        )


@dataclass(frozen=True)
class JobResult:
    stage_results: tuple[StageResult, ...]
    overall: str  # succeeded | failed | timed_out | canceled
    fingerprint: EnvironmentFingerprint | None
    artifacts: ArtifactManifest
    peak_note: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage_results": [s.to_dict() for s in self.stage_results],
            "overall": self.overall,
            "fingerprint": self.fingerprint.to_dict() if self.fingerprint else None,
            "artifacts": self.artifacts.to_dict(),
            "peak_note": self.peak_note,
        }

    @staticmethod
    def from_dict(data: dict) -> "JobResult":
        fingerprint = data.get("fingerprint")
        return JobResult(
            stage_results=tuple(StageResult.from_dict(s) for s in data["stage_results"]),
            overall=data["overall"],
            fingerprint=EnvironmentFingerprint.from_dict(fingerprint) if fingerprint else None,
            artifacts=ArtifactManifest.from_dict(data["artifacts"]),
            peak_note=data.get("peak_note"),
        )


@dataclass(frozen=True)
class JobContext:
    """Identity injected into every stage's environment."""

    job_id: int = 0
    build_id: int = 0
    commit_id: str = ""
    matrix_index: int = 0

    def env(self, stage: str) -> dict[str, str]:
        return {
            "CI": "true",
            "LABCI_JOB_ID": str(self.job_id),
            "LABCI_BUILD_ID": str(self.build_id),
            "LABCI_COMMIT": self.commit_id,
            "LABCI_STAGE": stage,
            "LABCI_MATRIX_INDEX": str(self.matrix_index),
        }


def _terminate_process_tree(proc: subprocess.Popen) -> None:
    """SIGTERM the whole process group, then SIGKILL after the grace period."""
    try:
        pgid = os.getpgid(proc.pid)
    except (ProcessLookupError, PermissionError):
        pgid = None
    if pgid is not None:
        try:
            os.killpg(pgid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            pass
    else:
        proc.terminate()
    try:
        proc.wait(timeout=TERMINATION_GRACE_S)
    except subprocess.TimeoutExpired:
        if pgid is not None:
            try:
                os.killpg(pgid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        else:
            proc.kill()
        proc.wait()


_VERSION_RE = re.compile(r"(\d+(?:\.\d+)*)")


def version_matches(requested: str, found: str) -> bool:
    """A requested version pins a prefix of the found version's components."""
    want = requested.split(".")
    have = found.split(".")
    return len(have) >= len(want) and have[: len(want)] == want


class ExecutorBackend:
    """Where stage commands actually run. One stage is handed over as a unit
    so a batch-submitting backend can map it to a single submission.
    """

    name = "abstract"
    kind = "cloud"
    capabilities: dict = {}

    def machine_facts(self) -> MachineFacts:
        raise NotImplementedError

    def probe_toolchain(self, language: str) -> str | None:
        raise NotImplementedError

    def run_stage(
        self,
        stage: str,
        commands: tuple[str, ...],
        *,
        cwd: Path,
        env: dict[str, str],
        deadline: float,
        cancel_event: threading.Event | None,
        on_line: Callable[[str], None],
    ) -> StageOutcome:
        raise NotImplementedError


class LocalBackend(ExecutorBackend):
    """Runs stage commands as host processes through the platform shell."""

    name = "local"

    def __init__(self, kind: str = "cloud", capabilities: dict | None = None) -> None:
        self.kind = kind
        self.capabilities = capabilities or {"os": "linux"}

    def machine_facts(self) -> MachineFacts:
        return MachineFacts(
            os_name=platform.system(),
            os_version=platform.release(),
            cpu_count=os.cpu_count() or 1,
            mem_total_mb=max(1, psutil.virtual_memory().total // (1024 * 1024)),
            hostname=socket.gethostname(),
        )

    def probe_toolchain(self, language: str) -> str | None:
        candidates = {"python": ("python3", "python")}.get(language, (language,))
        for executable in candidates:
            if shutil.which(executable) is None:
                continue
            try:
                probe = subprocess.run(
                    [executable, "--version"],
                    capture_output=True,
                    text=True,
                    timeout=10,
                )
            except (OSError, subprocess.TimeoutExpired):
                continue
            match = _VERSION_RE.search(probe.stdout or probe.stderr or "")
            if match:
                return match.group(1)
        return None

    def run_stage(
        self,
        stage: str,
        commands: tuple[str, ...],
        *,
        cwd: Path,
        env: dict[str, str],
        deadline: float,
        cancel_event: threading.Event | None,
        on_line: Callable[[str], None],
    ) -> StageOutcome:
        for command in commands:
            outcome = self._run_command(
                command, cwd=cwd, env=env, deadline=deadline,
                cancel_event=cancel_event, on_line=on_line,
            )
            if outcome.timed_out or outcome.canceled or outcome.exit_code != 0:
                return outcome
        return StageOutcome(exit_code=0)

    def _run_command(
        self,
        command: str,
        *,
        cwd: Path,
        env: dict[str, str],
        deadline: float,
        cancel_event: threading.Event | None,
        on_line: Callable[[str], None],
    ) -> StageOutcome:
        try:
            proc = subprocess.Popen(
                command,
                shell=True,
                cwd=str(cwd),
                env=env,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except OSError as exc:
            raise BackendUnavailable(f"cannot spawn shell: {exc}") from exc

        def drain() -> None:
            assert proc.stdout is not None
            for raw in proc.stdout:
                on_line(raw.decode("utf-8", errors="replace").rstrip("\r\n"))

        reader = threading.Thread(target=drain, daemon=True)
        reader.start()
        timed_out = False
        canceled = False
        while proc.poll() is None:
            if time.monotonic() >= deadline:
                timed_out = True
                break
            if cancel_event is not None and cancel_event.is_set():
                canceled = True
                break
            time.sleep(POLL_INTERVAL_S)
        if timed_out or canceled:
            _terminate_process_tree(proc)
        reader.join(timeout=TERMINATION_GRACE_S)
        returncode = proc.wait()
        if timed_out:
            return StageOutcome(timed_out=True)
        if canceled:
            return StageOutcome(canceled=True, exit_code=returncode)
        return StageOutcome(exit_code=returncode)


def collect_info(
    backend: ExecutorBackend, spec: JobSpec, *, log: JobLog | None = None
) -> EnvironmentFingerprint:
    """Capture the executing machine's fingerprint and write it as the first
    lines of the info stage, one key=value per line. A toolchain version
    mismatch is a log warning, never a failure: self-hosted agents
    legitimately differ from requested images.
    """
    facts = backend.machine_facts()
    toolchains: dict[str, str] = {}
    detected: str | None = None
    if spec.env.language:
        detected = backend.probe_toolchain(spec.env.language)
        if detected:
            toolchains[spec.env.language] = detected
    fingerprint = EnvironmentFingerprint(
        os_name=facts.os_name,
        os_version=facts.os_version,
        cpu_count=facts.cpu_count,
        mem_total_mb=facts.mem_total_mb,
        hostname=facts.hostname,
        runner_kind=backend.kind,
        toolchain_reports=tuple(sorted(toolchains.items())),
        captured_at=utc_now_rfc3339(),
    )
    if log is not None:
        for line in fingerprint.to_log_lines():
            log.write_line("info", line)
        log.write_line("info", f"backend={backend.name}")
        requested = spec.env.language_version
        if requested and detected and not version_matches(requested, detected):
            log.write_line(
                "info", f"toolchain mismatch: requested {requested}, found {detected}"
            )
    return fingerprint


def execute_stage(
    backend: ExecutorBackend,
    workspace: Path,
    stage_name: str,
    commands: tuple[str, ...],
    env_vars: dict[str, str],
    deadline: float,
    *,
    log: JobLog,
    ctx: JobContext | None = None,
    cancel_event: threading.Event | None = None,
) -> StageResult:
    """Run one stage's commands sequentially, stopping at the first nonzero
    exit. `deadline` is absolute on the monotonic clock; when it passes the
    process tree is terminated and the stage is timed_out.
    """
    if not workspace.is_dir():
        raise WorkspaceMissing(str(workspace))
    ctx = ctx or JobContext()
    env = {**os.environ, **env_vars, **ctx.env(stage_name)}
    offset = log.size
    started_at = utc_now_rfc3339()
    outcome = backend.run_stage(
        stage_name,
        commands,
        cwd=workspace,
        env=env,
        deadline=deadline,
        cancel_event=cancel_event,
        on_line=lambda text: log.write_line(stage_name, text),
    )
    if outcome.note:
        log.write_line(stage_name, outcome.note)
    if outcome.timed_out:
        log.write_line(stage_name, "stage timed out; process tree terminated")
        status = "timed_out"
    elif outcome.canceled:
        log.write_line(stage_name, "canceled by request")
        status = "failed"
    elif outcome.exit_code == 0:
        status = "succeeded"
    else:
        status = "failed"
    return StageResult(
        stage=stage_name,
        status=status,
        exit_code=outcome.exit_code,
        started_at=started_at,
        ended_at=utc_now_rfc3339(),
        log_offset=offset,
        log_length=log.size - offset,
    )


def _skipped(stage: str, log_size: int) -> StageResult:
    now = utc_now_rfc3339()
    return StageResult(
        stage=stage,
        status="skipped",
        exit_code=None,
        started_at=now,
        ended_at=now,
        log_offset=log_size,
        log_length=0,
    )


def collect_artifacts(workspace: Path, patterns: tuple[str, ...], job_id: int) -> ArtifactManifest:
    """Evaluate artifact globs against the workspace and digest every match."""
    matched: dict[str, ArtifactEntry] = {}
    for pattern in patterns:
        for path in workspace.glob(pattern):
            if not path.is_file():
                continue
            rel = path.relative_to(workspace).as_posix()
            validate_relative_path(rel)
            data = path.read_bytes()
            matched[rel] = ArtifactEntry(path=rel, size=len(data), digest=sha256_hex(data))
    return ArtifactManifest.build(job_id, matched.values())


def run_job(
    spec: JobSpec,
    backend: ExecutorBackend,
    workspace: Path,
    ctx: JobContext | None = None,
    *,
    log: JobLog | None = None,
    timeout_override_s: float | None = None,
    cancel_event: threading.Event | None = None,
) -> JobResult:
    """Execute one JobSpec end to end in the given workspace."""
    ctx = ctx or JobContext()
    log = log if log is not None else JobLog()
    timeout_s = timeout_override_s if timeout_override_s is not None else spec.timeout_minutes * 60.0
    deadline = time.monotonic() + timeout_s

    stage_results: list[StageResult] = []
    halted: str | None = None  # failed | timed_out | canceled once a stage stops the job
    fingerprint: EnvironmentFingerprint | None = None

    info_offset = log.size
    info_started = utc_now_rfc3339()
    try:
        fingerprint = collect_info(backend, spec, log=log)
        stage_results.append(
            StageResult(
                stage="info",
                status="succeeded",
                exit_code=None,
                started_at=info_started,
                ended_at=utc_now_rfc3339(),
                log_offset=info_offset,
                log_length=log.size - info_offset,
            )
        )
    except BackendUnavailable as exc:
        log.write_line("info", f"fingerprint capture failed: {exc}")
        stage_results.append(
            StageResult(
                stage="info",
                status="failed",
                exit_code=None,
                started_at=info_started,
                ended_at=utc_now_rfc3339(),
                log_offset=info_offset,
                log_length=log.size - info_offset,
            )
        )
        halted = "failed"

    for stage_name, commands in spec.stage_plan:
        if halted is None and cancel_event is not None and cancel_event.is_set():
            halted = "canceled"
        if halted:
            stage_results.append(_skipped(stage_name, log.size))
            continue
        try:
            result = execute_stage(
                backend,
                workspace,
                stage_name,
                commands,
                spec.env.env_dict(),
                deadline,
                log=log,
                ctx=ctx,
                cancel_event=cancel_event,
            )
        except PipelineError as exc:
            log.write_line("internal", f"executor error in {stage_name}: {exc}")
            stage_results.append(
                StageResult(
                    stage="internal",
                    status="failed",
                    exit_code=None,
                    started_at=utc_now_rfc3339(),
                    ended_at=utc_now_rfc3339(),
                    log_offset=log.size,
                    log_length=0,
                )
            )
            halted = "failed"
            continue
        stage_results.append(result)
        if result.status == "timed_out":
            halted = "timed_out"
        elif result.status == "failed":
            halted = "canceled" if cancel_event is not None and cancel_event.is_set() else "failed"

    artifacts = collect_artifacts(workspace, spec.artifacts.patterns, ctx.job_id)
    overall = halted or "succeeded"
    return JobResult(
        stage_results=tuple(stage_results),
        overall=overall,
        fingerprint=fingerprint,
        artifacts=artifacts,
    )


class JobState(str, Enum):
    QUEUED = "queued"
    CLAIMED = "claimed"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    TIMED_OUT = "timed_out"
    CANCELED = "canceled"


class JobEvent(str, Enum):
    CLAIMED = "claimed"
    STARTED = "started"
    STAGE_DONE = "stage_done"
    COMPLETED = "completed"
    CANCEL_REQUESTED = "cancel_requested"
    DEADLINE_EXCEEDED = "deadline_exceeded"


TERMINAL_STATES = frozenset(
    {JobState.SUCCEEDED, JobState.FAILED, JobState.TIMED_OUT, JobState.CANCELED}
)


def advance(state: JobState, event: JobEvent, outcome: JobState | None = None) -> JobState:
    """Server-side job lifecycle: queued -> claimed -> running -> terminal.

    `outcome` names the terminal state a COMPLETED event carries (defaults
    to succeeded). Terminal states absorb nothing: every event on them is an
    IllegalTransition. cancel_requested on claimed/running is a no-op at the
    state level; the cancel flag rides outside the machine until the runner
    observes it.
    """
    if state in TERMINAL_STATES:
        raise IllegalTransition(f"{state.value} is terminal; cannot apply {event.value}")
    if event is JobEvent.COMPLETED:
        outcome = outcome or JobState.SUCCEEDED
        if outcome not in TERMINAL_STATES:
            raise IllegalTransition(f"completed outcome must be terminal, got {outcome.value}")
        if state in (JobState.CLAIMED, JobState.RUNNING):
            return outcome
        raise IllegalTransition(f"cannot complete from {state.value}")
    if state is JobState.QUEUED:
        if event is JobEvent.CLAIMED:
            return JobState.CLAIMED
        if event is JobEvent.CANCEL_REQUESTED:
            return JobState.CANCELED
    elif state is JobState.CLAIMED:
        if event is JobEvent.STARTED:
            return JobState.RUNNING
        if event is JobEvent.CANCEL_REQUESTED:
            return JobState.CLAIMED
        if event is JobEvent.DEADLINE_EXCEEDED:
            return JobState.TIMED_OUT
    elif state is JobState.RUNNING:
        if event is JobEvent.STAGE_DONE:
            return JobState.RUNNING
        if event is JobEvent.CANCEL_REQUESTED:
            return JobState.RUNNING
        if event is JobEvent.DEADLINE_EXCEEDED:
            return JobState.TIMED_OUT
    raise IllegalTransition(f"no transition for {event.value} in {state.value}")
