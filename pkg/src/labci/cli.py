"""Command-line entry points.

`labci run` executes a pipeline in a single process with zero infrastructure:
it drives the same coordinator and runner code paths as the distributed mode,
just without HTTP in between, so the ledger and artifacts come out the same.

Exit codes: 0 success/reproduced, 1 pipeline or comparison failure,
2 usage/config error, 3 network/server error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import config as config_mod
from . import runner as runner_mod
from . import server as server_mod
from . import store as store_mod
from .pipeline import TERMINAL_STATES

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NETWORK = 3

DEFAULT_DATA_DIR = ".labci-data"


def _data_dir(args) -> Path:
    if getattr(args, "data_dir", None):
        return Path(args.data_dir)
    return Path(os.environ.get("LABCI_DATA_DIR", DEFAULT_DATA_DIR))


def _server_url(args) -> str:
    explicit = getattr(args, "server", None)
    if explicit:
        return explicit
    addr = os.environ.get("LABCI_ADDR", server_mod.DEFAULT_ADDR)
    return addr if addr.startswith("http") else f"http://{addr}"


def _parse_only(value: str | None) -> list[str] | None:
    if value is None:
        return None
    stages = [item.strip() for item in value.split(",") if item.strip()]
    unknown = [s for s in stages if s not in config_mod.STAGE_ORDER]
    if unknown:
        raise SystemExit(
            _fail(f"unknown stage(s) in --only: {', '.join(unknown)}", EXIT_USAGE)
        )
    return stages


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- validate -------------------------------------------------------------------


def cmd_validate(args) -> int:
    path = Path(args.path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        return _fail(f"cannot read {path}: {exc}", EXIT_USAGE)
    try:
        cfg = config_mod.parse_config(text)
    except config_mod.ConfigError as exc:
        if args.json:
            print(json.dumps({"ok": False, "error": str(exc)}))
        else:
            print(f"{path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    diagnostics = config_mod.lint(cfg)
    warnings = list(cfg.warnings) + [str(d) for d in diagnostics]
    if args.json:
        print(
            json.dumps(
                {
                    "ok": True,
                    "effective_stages": list(config_mod.effective_stages(cfg)),
                    "jobs": len(config_mod.expand_matrix(cfg)),
                    "warnings": warnings,
                }
            )
        )
    else:
        stages = ", ".join(config_mod.effective_stages(cfg))
        print(f"{path}: ok ({len(config_mod.expand_matrix(cfg))} job(s); stages: {stages})")
        for warning in warnings:
            print(f"warning: {warning}")
    if args.strict and warnings:
        return EXIT_FAILURE
    return EXIT_OK


# -- single-process run -----------------------------------------------------------


class LocalClient:
    """The runner's client interface wired straight to a Coordinator, no HTTP.

    This is what makes `labci run` produce the same records as serve+runner:
    both modes execute the identical claim/log/upload/complete sequence.
    """

    def __init__(self, coordinator: server_mod.Coordinator, token: str) -> None:
        self.coordinator = coordinator
        self.token = token

    def claim(self, capabilities: dict) -> dict | None:
        return self.coordinator.claim_job(self.token, capabilities)

    def append_log(self, job_id: int, seq: int, data: bytes) -> None:
        self.coordinator.append_log(self.token, job_id, seq, data)

    def upload_artifact(self, job_id: int, path: str, data: bytes) -> str:
        return self.coordinator.upload_artifact(self.token, job_id, path, data)

    def complete(self, job_id: int, result: dict) -> bool:
        try:
            self.coordinator.complete_job(self.token, job_id, result)
        except server_mod.IllegalTransition:
            return False
        return True

    def heartbeat(self, job_id: int) -> bool:
        return self.coordinator.heartbeat(self.token, job_id)

    def fetch_snapshot_manifest(self, commit_id: str) -> str:
        return self.coordinator.get_snapshot_manifest_text(commit_id)

    def fetch_blob(self, digest: str) -> bytes:
        return self.coordinator.store.blobs.get(digest)


def _print_build_result(build: dict) -> None:
    print(f"build {build['build_id']} ({build['commit_id'][:12]}): {build['status']}")
    for job in build["jobs"]:
        print(f"  job {job['job_id']} [matrix {job['matrix_index']}]: {job['state']}")
        for stage in job.get("stage_results") or []:
            code = "" if stage["exit_code"] is None else f" (exit {stage['exit_code']})"
            print(f"    {stage['stage']}: {stage['status']}{code}")
        for artifact in job["artifacts"]:
            print(f"    artifact {artifact['path']} {artifact['size']}B {artifact['digest'][:12]}")


def cmd_run(args) -> int:
    source = Path(args.source)
    if not (source / config_mod.CONFIG_FILENAME).is_file():
        return _fail(f"{source} has no {config_mod.CONFIG_FILENAME}", EXIT_USAGE)
    only = _parse_only(args.only)
    data_dir = _data_dir(args)

    coordinator = server_mod.Coordinator(server_mod.ServerConfig(data_dir=data_dir))
    _, commit_id = coordinator.store.import_snapshot(source)
    try:
        build = coordinator.trigger_build(args.repo, commit_id, only_stages=only)
    except server_mod.EmptyStagePlan as exc:
        return _fail(str(exc), EXIT_USAGE)
    if build["status"] == "config_error":
        return _fail(f"config error: {build['config_diagnostics']}", EXIT_USAGE)

    _, token = coordinator.register_runner("selfhosted", {"os": runner_mod.detect_os()})
    runner_cfg = runner_mod.RunnerConfig(
        server_url="local",
        token=token,
        kind="selfhosted",
        workspace_root=data_dir / "workspaces",
        poll_interval_s=0.01,
        heartbeat_interval_s=0.5,
        timeout_scale=args.timeout_scale,
    )
    runner = runner_mod.Runner(LocalClient(coordinator, token), runner_cfg)
    while runner.run_once():
        pass

    final = coordinator.get_build(build["build_id"])
    if args.json:
        print(json.dumps(final))
    else:
        _print_build_result(final)
    return EXIT_OK if final["status"] == "succeeded" else EXIT_FAILURE


# -- serve / runner ----------------------------------------------------------------


def make_server(args) -> server_mod.LabCIServer:
    """Build the HTTP server from flags, falling back to LABCI_* env vars."""
    addr = args.addr or os.environ.get("LABCI_ADDR", server_mod.DEFAULT_ADDR)
    addr = addr.removeprefix("http://")
    host, _, port_text = addr.partition(":")
    cap = args.parallel_cap or int(
        os.environ.get("LABCI_PARALLEL_CAP", server_mod.DEFAULT_PARALLEL_CAP)
    )
    coordinator = server_mod.Coordinator(
        server_mod.ServerConfig(data_dir=_data_dir(args), parallel_cap=cap)
    )
    return server_mod.LabCIServer(
        coordinator, host=host or "127.0.0.1", port=int(port_text or 8975)
    )


def cmd_serve(args) -> int:
    try:
        httpd = make_server(args)
    except OSError as exc:
        return _fail(f"cannot bind: {exc}", EXIT_NETWORK)
    coordinator = httpd.coordinator
    print(
        f"labci server on {httpd.address} "
        f"(data: {coordinator.store.data_dir}, cap: {coordinator.config.parallel_cap})"
    )
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        print("shutting down")
    return EXIT_OK


def _runner_config_from_args(args) -> tuple[runner_mod.ServerClient, runner_mod.RunnerConfig]:
    url = _server_url(args)
    client = runner_mod.ServerClient(url, args.token or "")
    kind = args.kind
    if args.register or not args.token:
        runner_id, token = client.register(kind, {"os": runner_mod.detect_os()})
        client.token = token
        print(f"registered {runner_id}; token: {token}")
    cfg = runner_mod.RunnerConfig(
        server_url=url,
        token=client.token,
        kind=kind,
        backend="batch_bridge" if args.backend == "batch-sim" else "local",
        poll_interval_s=args.poll_ms / 1000.0,
        workspace_root=Path(args.workspace),
        timeout_scale=args.timeout_scale,
    )
    return client, cfg


def cmd_runner(args) -> int:
    try:
        client, cfg = _runner_config_from_args(args)
    except runner_mod.TransportError as exc:
        return _fail(str(exc), EXIT_NETWORK)
    scheduler = None
    if cfg.backend == "batch_bridge":
        sched_cfg = (
            runner_mod.SchedulerConfig.from_file(args.scheduler_config)
            if args.scheduler_config
            else runner_mod.SchedulerConfig()
        )
        scheduler = runner_mod.SimulatedScheduler(sched_cfg)
    backend = runner_mod.make_backend(cfg, scheduler)
    runner = runner_mod.Runner(client, cfg, backend)
    print(f"runner attached to {cfg.server_url} (backend: {backend.name})")
    try:
        runner.run_forever()
    except KeyboardInterrupt:
        return EXIT_OK
    except runner_mod.AuthFailure as exc:
        return _fail(f"auth failure: {exc}", EXIT_NETWORK)
    return EXIT_OK


# -- thin API clients ---------------------------------------------------------------


def _client(args) -> runner_mod.ServerClient:
    return runner_mod.ServerClient(_server_url(args))


def cmd_trigger(args) -> int:
    client = _client(args)
    try:
        build = client.trigger_build(args.repo, args.commit, _parse_only(args.only))
    except runner_mod.TransportError as exc:
        return _fail(str(exc), EXIT_NETWORK)
    except runner_mod.RunnerError as exc:
        return _fail(str(exc), EXIT_USAGE)
    if args.json:
        print(json.dumps(build))
    else:
        jobs = ", ".join(str(j["job_id"]) for j in build["jobs"])
        print(f"build {build['build_id']} created with job(s): {jobs}")
    return EXIT_OK


def cmd_logs(args) -> int:
    client = _client(args)
    try:
        if args.json:
            job = client.get_job(args.job)
            log = client.get_log(args.job)
            print(json.dumps({**job, "log": log.decode("utf-8", errors="replace")}))
            return EXIT_OK
        printed = 0
        while True:
            log = client.get_log(args.job)
            if len(log) > printed:
                sys.stdout.write(log[printed:].decode("utf-8", errors="replace"))
                sys.stdout.flush()
                printed = len(log)
            job = client.get_job(args.job)
            if job["state"] in {s.value for s in TERMINAL_STATES} or args.no_follow:
                return EXIT_OK
            time.sleep(0.5)
    except runner_mod.TransportError as exc:
        return _fail(str(exc), EXIT_NETWORK)
    except runner_mod.RunnerError as exc:
        return _fail(str(exc), EXIT_USAGE)


def cmd_artifacts(args) -> int:
    client = _client(args)
    try:
        job = client.get_job(args.job)
        if args.fetch:
            data = client.get_artifact(args.job, args.fetch)
            out = Path(args.out or Path(args.fetch).name)
            out.write_bytes(data)
            print(f"wrote {out} ({len(data)} bytes)")
            return EXIT_OK
        if args.json:
            print(json.dumps(job["artifacts"]))
        else:
            for entry in job["artifacts"]:
                print(f"{entry['path']}\t{entry['size']}\t{entry['digest']}")
        return EXIT_OK
    except runner_mod.TransportError as exc:
        return _fail(str(exc), EXIT_NETWORK)
    except runner_mod.RunnerError as exc:
        return _fail(str(exc), EXIT_USAGE)


def _compare_jobs_from_build(client: runner_mod.ServerClient, build: dict) -> list[store_mod.CompareJob]:
    jobs = []
    for job in build["jobs"]:
        entries = tuple(
            store_mod.ArtifactEntry(path=e["path"], size=e["size"], digest=e["digest"])
            for e in job["artifacts"]
        )
        try:
            fingerprint = client.get_fingerprint(job["job_id"])
        except runner_mod.RunnerError:
            fingerprint = None
        jobs.append(
            store_mod.CompareJob(
                matrix_index=job["matrix_index"],
                job_id=job["job_id"],
                overall=job["overall"] or job["state"],
                manifest=store_mod.ArtifactManifest.build(job["job_id"], entries),
                fingerprint=fingerprint,
            )
        )
    return jobs


def cmd_compare(args) -> int:
    client = _client(args)
    try:
        build_a = client.get_build(args.build_a)
        build_b = client.get_build(args.build_b)
    except runner_mod.TransportError as exc:
        return _fail(str(exc), EXIT_NETWORK)
    except runner_mod.RunnerError as exc:
        return _fail(str(exc), EXIT_USAGE)

    if build_a["commit_id"] != build_b["commit_id"] and not args.cross_commit:
        return _fail(
            "builds are of different commits; reproducibility is defined per source "
            "version (pass --cross-commit to override)",
            EXIT_FAILURE,
        )
    try:
        report = store_mod.compare_builds(
            _compare_jobs_from_build(client, build_a),
            _compare_jobs_from_build(client, build_b),
        )
    except (store_mod.NotTerminal, store_mod.MatrixShapeMismatch) as exc:
        return _fail(str(exc), EXIT_FAILURE)

    if args.json:
        print(json.dumps(report.to_dict()))
    else:
        print(f"verdict: {report.verdict}")
        for pair in report.pairs:
            print(f"  matrix {pair.matrix_index}: job {pair.job_a} vs job {pair.job_b}")
            for verdict in pair.path_verdicts:
                if verdict.verdict == "identical":
                    print(f"    {verdict.path}: identical ({verdict.digest_a[:12]})")
                elif verdict.verdict == "differs":
                    print(
                        f"    {verdict.path}: differs "
                        f"({verdict.digest_a[:12]} vs {verdict.digest_b[:12]})"
                    )
                else:
                    print(f"    {verdict.path}: {verdict.verdict}")
            for field, a, b in pair.fingerprint_diffs:
                print(f"    note: fingerprint {field}: {a!r} vs {b!r}")
    return EXIT_OK if report.verdict == "reproduced" else EXIT_FAILURE


# -- argument parsing -----------------------------------------------------------


def _add_runner_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--server", help="server URL (default: LABCI_ADDR)")
    parser.add_argument("--token", help="runner token from registration")
    parser.add_argument("--register", action="store_true", help="register and print a new token")
    parser.add_argument(
        "--backend", choices=["local", "batch-sim"], default="local",
        help="execute stages locally or via the simulated batch scheduler",
    )
    parser.add_argument("--workspace", default="workspaces", help="workspace root directory")
    parser.add_argument("--poll-ms", type=int, default=2000, help="claim poll interval")
    parser.add_argument("--kind", choices=["selfhosted", "cloud"], default="selfhosted")
    parser.add_argument("--scheduler-config", help="JSON file for the simulated scheduler")
    parser.add_argument("--timeout-scale", type=float, default=1.0, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labci",
        description="Miniature CI/CD for reproducible computational experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and lint a pipeline file")
    p.add_argument("path")
    p.add_argument("--strict", action="store_true", help="exit 1 when warnings exist")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run a pipeline locally in one process")
    p.add_argument("source", help="directory containing .labci.yml")
    p.add_argument("--only", help="comma-separated stage subset (info always kept)")
    p.add_argument("--data-dir", help="where logs/artifacts/ledger go")
    p.add_argument("--repo", default="local", help="repository id for the ledger")
    p.add_argument("--timeout-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="start the coordination server")
    p.add_argument("--addr", help="host:port (default: LABCI_ADDR or 127.0.0.1:8975)")
    p.add_argument("--data-dir")
    p.add_argument("--parallel-cap", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("runner", help="attach a runner agent to a server")
    _add_runner_flags(p)
    p.set_defaults(func=cmd_runner)

    p = sub.add_parser("trigger", help="manually trigger a build of a stored commit")
    p.add_argument("repo")
    p.add_argument("commit")
    p.add_argument("--only", help="comma-separated stage subset")
    p.add_argument("--server")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_trigger)

    p = sub.add_parser("logs", help="stream a job's log until it is terminal")
    p.add_argument("job", type=int)
    p.add_argument("--server")
    p.add_argument("--no-follow", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_logs)

    p = sub.add_parser("artifacts", help="list or fetch a job's artifacts")
    p.add_argument("job", type=int)
    p.add_argument("--fetch", help="artifact path to download")
    p.add_argument("--out", help="output file for --fetch")
    p.add_argument("--server")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_artifacts)

    p = sub.add_parser("compare", help="compare two builds' artifacts by digest")
    p.add_argument("build_a", type=int)
    p.add_argument("build_b", type=int)
    p.add_argument("--cross-commit", action="store_true")
    p.add_argument("--server")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else EXIT_USAGE


def runner_main(argv: list[str] | None = None) -> int:
    """Entry point for the labci-runner console script."""
    parser = argparse.ArgumentParser(prog="labci-runner", description="labci runner agent")
    _add_runner_flags(parser)
    args = parser.parse_args(argv)
    return cmd_runner(args)


if __name__ == "__main__":
    sys.exit(main())
