"""Stage execution, job runs, log format, and the job state machine."""

from __future__ import annotations

import random
import re
import threading
import time

import pytest

from labci.config import parse_config, expand_matrix, CONFIG_STAGES
from labci.pipeline import (
    IllegalTransition,
    JobContext,
    JobEvent,
    JobLog,
    JobState,
    LocalBackend,
    MachineFacts,
    TERMINAL_STATES,
    WorkspaceMissing,
    advance,
    collect_info,
    execute_stage,
    run_job,
    version_matches,
)
from labci.store import sha256_hex

LOG_LINE_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{6}Z \[[a-z]+\] .*$"
)


def _spec(text: str):
    return expand_matrix(parse_config(text))[0]


def _deadline(seconds: float = 60.0) -> float:
    return time.monotonic() + seconds


class ConfiguredFactsBackend(LocalBackend):
    """Local execution with injected machine facts, as a stand-in for a
    beefier self-hosted node (56 CPUs / 256 GB)."""

    def __init__(self, facts: MachineFacts, kind: str = "selfhosted") -> None:
        super().__init__(kind=kind)
        self._facts = facts

    def machine_facts(self) -> MachineFacts:
        return self._facts


class TestExecuteStage:
    def test_true_succeeds(self, tmp_path):
        log = JobLog()
        result = execute_stage(
            LocalBackend(), tmp_path, "run", ("true",), {}, _deadline(), log=log
        )
        assert result.status == "succeeded"
        assert result.exit_code == 0

    def test_forced_exit_code(self, tmp_path):
        log = JobLog()
        result = execute_stage(
            LocalBackend(), tmp_path, "run", ("sh -c 'exit 3'",), {}, _deadline(), log=log
        )
        assert result.status == "failed"
        assert result.exit_code == 3

    def test_stops_at_first_failure(self, tmp_path):
        log = JobLog()
        result = execute_stage(
            LocalBackend(),
            tmp_path,
            "run",
            ("echo one", "sh -c 'exit 2'", "echo never"),
            {},
            _deadline(),
            log=log,
        )
        assert result.exit_code == 2
        text = log.bytes().decode()
        assert "one" in text
        assert "never" not in text

    def test_timeout_terminates_process_tree(self, tmp_path):
        log = JobLog()
        started = time.monotonic()
        result = execute_stage(
            LocalBackend(), tmp_path, "run", ("sleep 120",), {}, _deadline(1.0), log=log
        )
        elapsed = time.monotonic() - started
        assert result.status == "timed_out"
        assert elapsed < 5.0

    def test_env_vars_and_injected_ci_vars(self, tmp_path):
        log = JobLog()
        ctx = JobContext(job_id=9, build_id=4, commit_id="deadbeef", matrix_index=1)
        execute_stage(
            LocalBackend(),
            tmp_path,
            "run",
            ('sh -c \'echo "$CI/$LABCI_JOB_ID/$LABCI_STAGE/$LABCI_MATRIX_INDEX/$MY_VAR"\'',),
            {"MY_VAR": "custom"},
            _deadline(),
            log=log,
            ctx=ctx,
        )
        assert "true/9/run/1/custom" in log.bytes().decode()

    def test_missing_workspace(self, tmp_path):
        with pytest.raises(WorkspaceMissing):
            execute_stage(
                LocalBackend(), tmp_path / "void", "run", ("true",), {}, _deadline(),
                log=JobLog(),
            )

    def test_log_line_format(self, tmp_path):
        log = JobLog()
        execute_stage(
            LocalBackend(), tmp_path, "test", ("echo alpha", "echo beta"), {},
            _deadline(), log=log,
        )
        lines = log.bytes().decode().splitlines()
        assert len(lines) == 2
        for line in lines:
            assert LOG_LINE_RE.match(line), line
            assert "[test]" in line

    def test_stderr_captured(self, tmp_path):
        log = JobLog()
        execute_stage(
            LocalBackend(), tmp_path, "run", ("sh -c 'echo oops >&2'",), {},
            _deadline(), log=log,
        )
        assert "oops" in log.bytes().decode()


class TestCollectInfo:
    def test_local_facts_sane(self, tmp_path):
        spec = _spec("run:\n  - true\n")
        fingerprint = collect_info(LocalBackend(), spec)
        assert fingerprint.cpu_count >= 1
        assert fingerprint.mem_total_mb > 0
        assert fingerprint.hostname

    def test_configured_facts_echoed(self):
        facts = MachineFacts(
            os_name="Linux", os_version="3.10", cpu_count=56,
            mem_total_mb=262144, hostname="hpc-head",
        )
        spec = _spec("run:\n  - true\n")
        fingerprint = collect_info(ConfiguredFactsBackend(facts), spec)
        assert fingerprint.cpu_count == 56
        assert fingerprint.mem_total_mb == 262144
        assert fingerprint.runner_kind == "selfhosted"

    def test_fingerprint_serialized_as_first_log_lines(self):
        spec = _spec("run:\n  - true\n")
        log = JobLog()
        collect_info(LocalBackend(), spec, log=log)
        lines = log.bytes().decode().splitlines()
        payloads = [line.split("] ", 1)[1] for line in lines]
        assert payloads[0].startswith("os_name=")
        for payload in payloads:
            assert "=" in payload

    def test_toolchain_mismatch_warning(self):
        spec = _spec("language: python\npython: '1.0'\nrun:\n  - true\n")
        log = JobLog()
        fingerprint = collect_info(LocalBackend(), spec, log=log)
        detected = dict(fingerprint.toolchain_reports).get("python")
        assert detected is not None
        assert f"toolchain mismatch: requested 1.0, found {detected}" in log.bytes().decode()

    def test_matching_prefix_no_warning(self):
        detected = LocalBackend().probe_toolchain("python")
        assert detected is not None
        major = detected.split(".")[0]
        spec = _spec(f"language: python\npython: '{major}'\nrun:\n  - true\n")
        log = JobLog()
        collect_info(LocalBackend(), spec, log=log)
        assert "toolchain mismatch" not in log.bytes().decode()

    def test_version_prefix_semantics(self):
        assert version_matches("3", "3.11.4")
        assert version_matches("3.11", "3.11.4")
        assert not version_matches("3.6", "3.8.0")
        assert not version_matches("3.11.4.1", "3.11.4")


class TestRunJob:
    def test_workflow_shape_all_succeed(self, tmp_path):
        spec = _spec("install:\n  - echo installing\nrun:\n  - echo done\n")
        result = run_job(spec, LocalBackend(), tmp_path)
        assert [s.stage for s in result.stage_results] == ["info", "install", "run"]
        assert all(s.status == "succeeded" for s in result.stage_results)
        assert result.overall == "succeeded"

    def test_failure_skips_rest(self, tmp_path):
        text = (
            "install:\n  - true\n"
            "test:\n  - sh -c 'exit 1'\n"
            "deploy:\n  - true\n"
            "run:\n  - true\n"
            "report:\n  - true\n"
        )
        result = run_job(_spec(text), LocalBackend(), tmp_path)
        statuses = {s.stage: s.status for s in result.stage_results}
        assert statuses == {
            "info": "succeeded",
            "install": "succeeded",
            "test": "failed",
            "deploy": "skipped",
            "run": "skipped",
            "report": "skipped",
        }
        assert result.overall == "failed"

    def test_artifact_collection_and_digest(self, tmp_path):
        text = (
            "run:\n  - sh -c 'printf col1,col2 > result.csv'\n"
            "artifacts:\n  - '*.csv'\n"
        )
        result = run_job(_spec(text), LocalBackend(), tmp_path)
        assert len(result.artifacts.entries) == 1
        entry = result.artifacts.entries[0]
        assert entry.path == "result.csv"
        assert entry.digest == sha256_hex(b"col1,col2")

    def test_artifacts_collected_even_on_failure(self, tmp_path):
        text = (
            "run:\n"
            "  - sh -c 'echo partial > out.txt'\n"
            "  - sh -c 'exit 1'\n"
            "artifacts:\n  - out.txt\n"
        )
        result = run_job(_spec(text), LocalBackend(), tmp_path)
        assert result.overall == "failed"
        assert [e.path for e in result.artifacts.entries] == ["out.txt"]

    def test_timeout_override_marks_timed_out(self, tmp_path):
        spec = _spec("run:\n  - sleep 60\ntimeout_minutes: 1\n")
        started = time.monotonic()
        result = run_job(spec, LocalBackend(), tmp_path, timeout_override_s=1.0)
        elapsed = time.monotonic() - started
        assert result.overall == "timed_out"
        assert elapsed < 10.0
        statuses = [s.status for s in result.stage_results]
        assert statuses.count("timed_out") == 1

    def test_cancel_event_cancels(self, tmp_path):
        spec = _spec("run:\n  - sleep 30\nreport:\n  - true\n")
        cancel = threading.Event()
        timer = threading.Timer(0.3, cancel.set)
        timer.start()
        started = time.monotonic()
        result = run_job(spec, LocalBackend(), tmp_path, cancel_event=cancel)
        assert time.monotonic() - started < 10.0
        assert result.overall == "canceled"
        assert result.stage_results[-1].status == "skipped"

    def test_log_ranges_contiguous(self, tmp_path):
        text = "install:\n  - echo a\nrun:\n  - echo b\n  - echo c\nreport:\n  - echo d\n"
        log = JobLog()
        result = run_job(_spec(text), LocalBackend(), tmp_path, log=log)
        offset = 0
        for stage in result.stage_results:
            assert stage.log_offset == offset
            offset += stage.log_length
        assert offset == log.size

    def test_skipped_stage_has_empty_range_and_no_exit_code(self, tmp_path):
        text = "test:\n  - sh -c 'exit 1'\nrun:\n  - true\n"
        result = run_job(_spec(text), LocalBackend(), tmp_path)
        skipped = result.stage_results[-1]
        assert skipped.status == "skipped"
        assert skipped.exit_code is None
        assert skipped.log_length == 0

    def test_stage_order_subsequence_random_failures(self, tmp_path):
        rng = random.Random(20260811)
        canonical = ("info",) + CONFIG_STAGES
        for _ in range(20):
            chosen = [s for s in CONFIG_STAGES if rng.random() < 0.6] or ["run"]
            fail_at = rng.choice(chosen + [None])
            lines = []
            for stage in chosen:
                command = "sh -c 'exit 1'" if stage == fail_at else "true"
                lines.append(f"{stage}:\n  - {command}")
            result = run_job(_spec("\n".join(lines) + "\n"), LocalBackend(), tmp_path)
            stages = [s.stage for s in result.stage_results]
            positions = [canonical.index(s) for s in stages]
            assert positions == sorted(positions)
            if fail_at is None:
                assert result.overall == "succeeded"
            else:
                assert result.overall == "failed"
                non_skipped = [s for s in result.stage_results if s.status != "skipped"]
                assert non_skipped[-1].status == "failed"
                assert sum(1 for s in result.stage_results if s.status == "failed") == 1

    def test_result_round_trips_through_dict(self, tmp_path):
        spec = _spec("run:\n  - echo hi\nartifacts:\n  - '*.none'\n")
        result = run_job(spec, LocalBackend(), tmp_path)
        from labci.pipeline import JobResult

        assert JobResult.from_dict(result.to_dict()) == result

    def test_deterministic_artifact_digests(self, tmp_path):
        text = "run:\n  - sh -c 'printf stable > out.bin'\nartifacts:\n  - out.bin\n"
        spec = _spec(text)
        ws1 = tmp_path / "one"
        ws2 = tmp_path / "two"
        ws1.mkdir()
        ws2.mkdir()
        r1 = run_job(spec, LocalBackend(), ws1)
        r2 = run_job(spec, LocalBackend(), ws2)
        assert [e.digest for e in r1.artifacts.entries] == [
            e.digest for e in r2.artifacts.entries
        ]


class TestStateMachine:
    LEGAL = {
        (JobState.QUEUED, JobEvent.CLAIMED): JobState.CLAIMED,
        (JobState.QUEUED, JobEvent.CANCEL_REQUESTED): JobState.CANCELED,
        (JobState.CLAIMED, JobEvent.STARTED): JobState.RUNNING,
        (JobState.CLAIMED, JobEvent.COMPLETED): JobState.SUCCEEDED,
        (JobState.CLAIMED, JobEvent.CANCEL_REQUESTED): JobState.CLAIMED,
        (JobState.CLAIMED, JobEvent.DEADLINE_EXCEEDED): JobState.TIMED_OUT,
        (JobState.RUNNING, JobEvent.STAGE_DONE): JobState.RUNNING,
        (JobState.RUNNING, JobEvent.COMPLETED): JobState.SUCCEEDED,
        (JobState.RUNNING, JobEvent.CANCEL_REQUESTED): JobState.RUNNING,
        (JobState.RUNNING, JobEvent.DEADLINE_EXCEEDED): JobState.TIMED_OUT,
    }

    def test_exhaustive_transition_table(self):
        for state in JobState:
            for event in JobEvent:
                expected = self.LEGAL.get((state, event))
                if expected is None:
                    with pytest.raises(IllegalTransition):
                        advance(state, event)
                else:
                    assert advance(state, event) is expected

    def test_terminal_states_absorb_everything(self):
        for state in TERMINAL_STATES:
            for event in JobEvent:
                with pytest.raises(IllegalTransition):
                    advance(state, event)

    def test_completed_carries_outcome(self):
        for outcome in TERMINAL_STATES:
            assert advance(JobState.RUNNING, JobEvent.COMPLETED, outcome) is outcome

    def test_completed_outcome_must_be_terminal(self):
        with pytest.raises(IllegalTransition):
            advance(JobState.RUNNING, JobEvent.COMPLETED, JobState.QUEUED)

    def test_canonical_path(self):
        state = JobState.QUEUED
        state = advance(state, JobEvent.CLAIMED)
        state = advance(state, JobEvent.STARTED)
        state = advance(state, JobEvent.STAGE_DONE)
        state = advance(state, JobEvent.COMPLETED, JobState.SUCCEEDED)
        assert state is JobState.SUCCEEDED
