"""Shared helpers for the test suite."""

from __future__ import annotations

from pathlib import Path

from labci.pipeline import EnvironmentFingerprint, JobResult, StageResult, utc_now_rfc3339
from labci.server import Coordinator, ServerConfig
from labci.store import ArtifactManifest, snapshot_of_tree

WORKFLOW_TEXT = """\
install:
  - pip install -r requirements.txt
script: # run experiment
  - python main.py
"""

ECHO_CONFIG = "run:\n  - echo done\n"

MATRIX_CONFIG = """\
run:
  - sh -c 'echo "shard $SHARD"'
matrix:
  - env: {SHARD: 0}
  - env: {SHARD: 1}
"""


def make_source(root: Path, config_text: str | None, files: dict[str, str] | None = None) -> tuple[Path, str]:
    """Write a source tree and return (path, commit_id)."""
    root.mkdir(parents=True, exist_ok=True)
    if config_text is not None:
        (root / ".labci.yml").write_text(config_text, encoding="utf-8")
    for name, content in (files or {}).items():
        dest = root / name
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(content, encoding="utf-8")
    return root, snapshot_of_tree(root).digest()


def make_coordinator(data_dir: Path, cap: int = 4, heartbeat_s: float = 10.0) -> Coordinator:
    return Coordinator(
        ServerConfig(data_dir=data_dir, parallel_cap=cap, heartbeat_interval_s=heartbeat_s)
    )


def synthetic_result(job_id: int, overall: str = "succeeded") -> JobResult:
    """A minimal, well-formed JobResult for protocol-level tests that do not
    actually execute stages."""
    now = utc_now_rfc3339()
    fingerprint = EnvironmentFingerprint(
        os_name="Linux",
        os_version="test",
        cpu_count=1,
        mem_total_mb=1024,
        hostname="testhost",
        runner_kind="selfhosted",
        captured_at=now,
    )
    status = "succeeded" if overall == "succeeded" else "failed"
    return JobResult(
        stage_results=(
            StageResult(
                stage="info", status="succeeded", exit_code=None,
                started_at=now, ended_at=now, log_offset=0, log_length=0,
            ),
            StageResult(
                stage="run", status=status,
                exit_code=0 if status == "succeeded" else 1,
                started_at=now, ended_at=now, log_offset=0, log_length=0,
            ),
        ),
        overall=overall,
        fingerprint=fingerprint,
        artifacts=ArtifactManifest.build(job_id, []),
    )


def drive_job(coordinator: Coordinator, token: str, overall: str = "succeeded",
              log_lines: list[bytes] | None = None,
              artifacts: dict[str, bytes] | None = None) -> int | None:
    """Claim one job and walk it through the full protocol; returns job_id."""
    claimed = coordinator.claim_job(token)
    if claimed is None:
        return None
    job_id = claimed["job_id"]
    for seq, chunk in enumerate(log_lines or [b"2026-01-01T00:00:00.000000Z [run] ok\n"]):
        coordinator.append_log(token, job_id, seq, chunk)
    for path, data in (artifacts or {}).items():
        coordinator.upload_artifact(token, job_id, path, data)
    coordinator.complete_job(token, job_id, synthetic_result(job_id, overall).to_dict())
    return job_id
