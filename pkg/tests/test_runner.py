"""Runner agent: workspace preparation, the attach loop over real HTTP,
log streaming fidelity, and the simulated batch bridge."""

from __future__ import annotations

import threading
import time

import pytest

from labci.pipeline import JobLog, LocalBackend, run_job
from labci.runner import (
    BatchBridgeBackend,
    BatchLost,
    DigestMismatch,
    Runner,
    RunnerConfig,
    SchedulerConfig,
    ServerClient,
    SimulatedScheduler,
    TransportError,
    prepare_workspace,
)
from labci.server import LabCIServer
from labci.store import sha256_hex, snapshot_of_tree
from support import ECHO_CONFIG, MATRIX_CONFIG, make_coordinator, make_source


@pytest.fixture()
def served(tmp_path):
    coordinator = make_coordinator(tmp_path / "data", cap=4, heartbeat_s=0.2)
    server = LabCIServer(coordinator, host="127.0.0.1", port=0)
    server.start()
    yield server, coordinator
    server.stop()


def _runner_for(server, tmp_path, **overrides) -> tuple[Runner, ServerClient]:
    client = ServerClient(server.address, max_retries=2)
    _, token = client.register("selfhosted", {"os": "linux"})
    client.token = token
    defaults = dict(
        server_url=server.address,
        token=token,
        kind="selfhosted",
        workspace_root=tmp_path / "ws",
        poll_interval_s=0.05,
        heartbeat_interval_s=0.1,
    )
    defaults.update(overrides)
    cfg = RunnerConfig(**defaults)
    return Runner(client, cfg), client


def _push(server, tmp_path, config, files=None, event="evt-runner"):
    src, commit = make_source(tmp_path / "src", config, files)
    client = ServerClient(server.address)
    build = client.push_event("lab", commit, str(src), event)
    return build, commit


class TestPrepareWorkspace:
    def test_materializes_and_verifies(self, served, tmp_path):
        server, coordinator = served
        _, commit = _push(server, tmp_path, ECHO_CONFIG, {"data/input.txt": "42\n"})
        client = ServerClient(server.address)
        workspace = prepare_workspace(client, commit, tmp_path / "ws", job_id=1)
        assert (workspace.path / ".labci.yml").is_file()
        assert (workspace.path / "data/input.txt").read_text() == "42\n"
        assert snapshot_of_tree(workspace.path).digest() == commit

    def test_exec_permissions_survive(self, served, tmp_path):
        server, coordinator = served
        src, _ = make_source(tmp_path / "src", ECHO_CONFIG)
        script = src / "tool.sh"
        script.write_text("#!/bin/sh\necho ok\n")
        script.chmod(0o755)
        commit = snapshot_of_tree(src).digest()
        client = ServerClient(server.address)
        client.push_event("lab", commit, str(src), "evt-exec")
        workspace = prepare_workspace(client, commit, tmp_path / "ws", job_id=2)
        assert (workspace.path / "tool.sh").stat().st_mode & 0o100

    def test_tampered_manifest_raises_digest_mismatch(self, served, tmp_path):
        server, coordinator = served
        _, commit = _push(server, tmp_path, ECHO_CONFIG, {"a.txt": "one\n"})
        other = coordinator.store.blobs.put(b"substituted\n")
        manifest_path = coordinator.store.data_dir / "snapshots" / f"{commit}.manifest"
        text = manifest_path.read_text()
        target = [line for line in text.splitlines() if line.endswith(" a.txt")][0]
        swapped = text.replace(target.split(" ")[1], other)
        manifest_path.write_text(swapped)
        client = ServerClient(server.address)
        with pytest.raises(DigestMismatch):
            prepare_workspace(client, commit, tmp_path / "ws", job_id=3)


class TestRunnerLoop:
    def test_one_job_end_to_end(self, served, tmp_path):
        server, coordinator = served
        build, _ = _push(server, tmp_path, "run:\n  - echo round trip\n")
        runner, client = _runner_for(server, tmp_path)
        assert runner.run_once() is True
        job = client.get_job(build["jobs"][0]["job_id"])
        assert job["state"] == "succeeded"
        log = client.get_log(job["job_id"])
        assert b"round trip" in log
        assert b"os_name=" in log  # fingerprint leads the info stage

    def test_server_log_equals_local_transcript(self, served, tmp_path):
        server, coordinator = served
        build, _ = _push(server, tmp_path, "run:\n  - echo a\n  - echo b\nreport:\n  - echo c\n")
        runner, client = _runner_for(server, tmp_path)
        sent: list[bytes] = []
        original = ServerClient.append_log

        def recording(self_, job_id, seq, data):
            sent.append(data)
            return original(self_, job_id, seq, data)

        ServerClient.append_log = recording  # type: ignore[method-assign]
        try:
            runner.run_once()
        finally:
            ServerClient.append_log = original  # type: ignore[method-assign]
        job_id = build["jobs"][0]["job_id"]
        assert client.get_log(job_id) == b"".join(sent)

    def test_duplicate_chunk_resend_is_invisible(self, served, tmp_path):
        server, coordinator = served
        build, _ = _push(server, tmp_path, ECHO_CONFIG)
        _, token = coordinator.register_runner("selfhosted", {"os": "linux"})
        job = coordinator.claim_job(token)
        client = ServerClient(server.address, token)
        client.append_log(job["job_id"], 0, b"once\n")
        client.append_log(job["job_id"], 0, b"once\n")  # retry after lost ack
        client.append_log(job["job_id"], 1, b"twice\n")
        assert client.get_log(job["job_id"]) == b"once\ntwice\n"

    def test_random_chunk_boundaries_reassemble(self, served, tmp_path):
        import random

        server, coordinator = served
        build, _ = _push(server, tmp_path, ECHO_CONFIG)
        _, token = coordinator.register_runner("selfhosted", {"os": "linux"})
        job = coordinator.claim_job(token)
        client = ServerClient(server.address, token)
        payload = bytes(random.Random(5).randbytes(4096))
        rng = random.Random(11)
        offset = 0
        seq = 0
        while offset < len(payload):
            size = rng.randrange(1, 257)
            chunk = payload[offset : offset + size]
            client.append_log(job["job_id"], seq, chunk)
            if rng.random() < 0.3:
                client.append_log(job["job_id"], seq, chunk)  # duplicate send
            offset += size
            seq += 1
        assert client.get_log(job["job_id"]) == payload

    def test_matrix_jobs_isolated_workspaces(self, served, tmp_path):
        server, coordinator = served
        config = MATRIX_CONFIG.replace(
            "- sh -c 'echo \"shard $SHARD\"'",
            "- sh -c 'echo \"shard $SHARD\" > out-$SHARD.txt'",
        ) + "artifacts:\n  - out-*.txt\n"
        build, _ = _push(server, tmp_path, config)
        runner, client = _runner_for(server, tmp_path)
        assert runner.run_once() and runner.run_once()
        views = client.get_build(build["build_id"])["jobs"]
        by_index = {j["matrix_index"]: [a["path"] for a in j["artifacts"]] for j in views}
        assert by_index == {0: ["out-0.txt"], 1: ["out-1.txt"]}

    def test_workspace_deleted_on_success_kept_on_failure(self, served, tmp_path):
        server, coordinator = served
        _push(server, tmp_path, "run:\n  - true\n", event="ok")
        src2, commit2 = make_source(tmp_path / "src2", "run:\n  - sh -c 'exit 1'\n")
        ServerClient(server.address).push_event("lab", commit2, str(src2), "bad")
        runner, _ = _runner_for(server, tmp_path)
        assert runner.run_once() and runner.run_once()
        remaining = list((tmp_path / "ws").glob("job-*"))
        assert len(remaining) == 1  # only the failed job's workspace is retained

    def test_recovers_after_transient_outage(self, served, tmp_path):
        server, coordinator = served
        stop = threading.Event()
        runner, client = _runner_for(server, tmp_path)
        runner.client.max_retries = 0
        build, _ = _push(server, tmp_path, ECHO_CONFIG)

        # simulate an outage for the first polls by pointing at a dead port,
        # then heal the client to the live server
        good_url = runner.client.server_url
        runner.client.server_url = "http://127.0.0.1:1"
        thread = threading.Thread(target=runner.run_forever, args=(stop,), daemon=True)
        thread.start()
        time.sleep(0.3)
        runner.client.server_url = good_url
        deadline = time.time() + 15
        job_id = build["jobs"][0]["job_id"]
        while time.time() < deadline:
            if client.get_job(job_id)["state"] == "succeeded":
                break
            time.sleep(0.1)
        stop.set()
        thread.join(timeout=5)
        assert client.get_job(job_id)["state"] == "succeeded"

    def test_cancel_mid_run_completes_canceled(self, served, tmp_path):
        server, coordinator = served
        build, _ = _push(server, tmp_path, "run:\n  - sleep 30\n")
        runner, client = _runner_for(server, tmp_path)
        stop = threading.Event()
        thread = threading.Thread(target=runner.run_forever, args=(stop,), daemon=True)
        thread.start()
        job_id = build["jobs"][0]["job_id"]
        deadline = time.time() + 10
        while time.time() < deadline:
            if client.get_job(job_id)["state"] == "running":
                break
            time.sleep(0.05)
        started_cancel = time.time()
        client.cancel_build(build["build_id"])
        while time.time() < started_cancel + 15:
            if client.get_job(job_id)["state"] == "canceled":
                break
            time.sleep(0.1)
        stop.set()
        thread.join(timeout=10)
        assert client.get_job(job_id)["state"] == "canceled"
        # one heartbeat interval (0.1 s) + termination grace (5 s) + slack
        assert time.time() - started_cancel < 10


class TestSimulatedScheduler:
    def test_states_progress_pending_running_done(self):
        scheduler = SimulatedScheduler(SchedulerConfig(delay_ticks=3))
        batch = scheduler.submit(("echo hi",), cwd=__import__("pathlib").Path("."), env={})
        states = [scheduler.poll(batch) for _ in range(3)]
        assert states == ["pending", "running", "done"]
        lines, exit_code = scheduler.fetch_output(batch)
        assert lines == ("hi",)
        assert exit_code == 0

    def test_capacity_holds_batches_pending(self, tmp_path):
        scheduler = SimulatedScheduler(SchedulerConfig(capacity=1, delay_ticks=4))
        first = scheduler.submit(("true",), cwd=tmp_path, env={})
        second = scheduler.submit(("true",), cwd=tmp_path, env={})
        assert scheduler.poll(first) == "pending"
        assert scheduler.poll(first) == "running"
        assert scheduler.poll(second) == "pending"
        assert scheduler.poll(second) == "pending"  # slot still held by first
        while scheduler.poll(first) != "done":
            pass
        assert scheduler.poll(second) == "running"

    def test_drop_after_loses_batch(self, tmp_path):
        scheduler = SimulatedScheduler(SchedulerConfig(drop_after=2))
        batch = scheduler.submit(("echo hi",), cwd=tmp_path, env={})
        assert scheduler.poll(batch) == "pending"
        with pytest.raises(BatchLost):
            scheduler.poll(batch)


class TestBatchBridge:
    def _spec(self, text):
        from labci.config import expand_matrix, parse_config

        return expand_matrix(parse_config(text))[0]

    def test_relays_output_and_exit(self, tmp_path):
        spec = self._spec("run:\n  - echo hi\n")
        backend = BatchBridgeBackend(SimulatedScheduler(SchedulerConfig(tick_ms=1)))
        log = JobLog()
        result = run_job(spec, backend, tmp_path, log=log)
        assert result.overall == "succeeded"
        text = log.bytes().decode()
        assert "hi" in text
        assert "backend=batch_bridge" in text

    def test_lost_batch_fails_stage_and_skips_rest(self, tmp_path):
        spec = self._spec("run:\n  - echo hi\nreport:\n  - echo bye\n")
        backend = BatchBridgeBackend(
            SimulatedScheduler(SchedulerConfig(tick_ms=1, drop_after=2))
        )
        log = JobLog()
        result = run_job(spec, backend, tmp_path, log=log)
        statuses = {s.stage: s.status for s in result.stage_results}
        assert statuses["run"] == "failed"
        assert statuses["report"] == "skipped"
        assert "batch_lost" in log.bytes().decode()

    def test_backend_equivalence_statuses_and_digests(self, tmp_path):
        text = (
            "install:\n  - echo preparing\n"
            "run:\n  - sh -c 'printf deterministic > out.bin'\n"
            "report:\n  - cat out.bin\n"
            "artifacts:\n  - out.bin\n"
        )
        spec = self._spec(text)
        ws_local = tmp_path / "local"
        ws_bridge = tmp_path / "bridge"
        ws_local.mkdir()
        ws_bridge.mkdir()
        local = run_job(spec, LocalBackend(kind="selfhosted"), ws_local)
        bridge = run_job(
            spec,
            BatchBridgeBackend(SimulatedScheduler(SchedulerConfig(tick_ms=1))),
            ws_bridge,
        )
        assert [(s.stage, s.status) for s in local.stage_results] == [
            (s.stage, s.status) for s in bridge.stage_results
        ]
        assert [e.digest for e in local.artifacts.entries] == [
            e.digest for e in bridge.artifacts.entries
        ]
        assert local.artifacts.entries[0].digest == sha256_hex(b"deterministic")

    def test_timeout_while_polling(self, tmp_path):
        spec = self._spec("run:\n  - echo hi\ntimeout_minutes: 1\n")
        backend = BatchBridgeBackend(
            SimulatedScheduler(SchedulerConfig(tick_ms=200, delay_ticks=1000))
        )
        result = run_job(spec, backend, tmp_path, timeout_override_s=0.5)
        assert result.overall == "timed_out"


class TestTransportErrors:
    def test_retries_exhausted_raise_transport_error(self):
        client = ServerClient("http://127.0.0.1:1", max_retries=1)
        with pytest.raises(TransportError):
            client.claim({"os": "linux"})
