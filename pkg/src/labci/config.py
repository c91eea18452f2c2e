"""Pipeline configuration: parse `.labci.yml`, validate it, and expand the
environment matrix into concrete job specifications.

Everything here is a pure function over immutable values.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import yaml

CONFIG_FILENAME = ".labci.yml"

OS_CHOICES = ("linux", "macos", "windows")
DEFAULT_OS = "linux"
DEFAULT_TIMEOUT_MINUTES = 50

# Canonical stage order; "info" is implicit and always injected first.
CONFIG_STAGES = ("install", "build", "test", "deploy", "run", "report")
STAGE_ORDER = ("info",) + CONFIG_STAGES

# `<language>: <version>` shorthand is resolved against this set so that a
# mismatched shorthand key is an error rather than a silently ignored key.
KNOWN_LANGUAGES = frozenset(
    {"python", "ruby", "node", "nodejs", "go", "rust", "java", "perl", "php", "julia", "r", "c", "cpp"}
)

ENV_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

KNOWN_TOP_LEVEL_KEYS = frozenset(
    {"os", "dist", "language", "language_version", "env", "matrix", "artifacts", "timeout_minutes", "script"}
    | set(CONFIG_STAGES)
)


class ConfigError(Exception):
    """Base class for configuration problems."""


class ConfigSyntaxError(ConfigError):
    """Malformed document; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigValidationError(ConfigError):
    pass


@dataclass(frozen=True)
class EnvironmentSpec:
    os: str = DEFAULT_OS
    dist: str | None = None
    language: str | None = None
    language_version: str | None = None
    env_vars: tuple[tuple[str, str], ...] = ()

    def env_dict(self) -> dict[str, str]:
        return dict(self.env_vars)

    def to_dict(self) -> dict:
        return {
            "os": self.os,
            "dist": self.dist,
            "language": self.language,
            "language_version": self.language_version,
            "env_vars": [list(pair) for pair in self.env_vars],
        }

    @staticmethod
    def from_dict(data: dict) -> "EnvironmentSpec":
        return EnvironmentSpec(
            os=data.get("os", DEFAULT_OS),
            dist=data.get("dist"),
            language=data.get("language"),
            language_version=data.get("language_version"),
            env_vars=tuple((k, v) for k, v in data.get("env_vars", [])),
        )


@dataclass(frozen=True)
class StageScripts:
    """One optional command list per configurable stage."""

    commands: tuple[tuple[str, tuple[str, ...]], ...]  # (stage, commands), canonical order

    def get(self, stage: str) -> tuple[str, ...]:
        for name, commands in self.commands:
            if name == stage:
                return commands
        return ()

    def nonempty_stages(self) -> tuple[str, ...]:
        return tuple(name for name, commands in self.commands if commands)


@dataclass(frozen=True)
class MatrixSpec:
    entries: tuple[dict, ...] = ()  # partial EnvironmentSpec overrides, raw form


@dataclass(frozen=True)
class ArtifactSpec:
    patterns: tuple[str, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    base_env: EnvironmentSpec
    stages: StageScripts
    matrix: MatrixSpec
    artifacts: ArtifactSpec
    timeout_minutes: int = DEFAULT_TIMEOUT_MINUTES
    warnings: tuple[str, ...] = ()  # non-fatal parse warnings (unknown keys)


@dataclass(frozen=True)
class JobSpec:
    """One schedulable unit: a fully-resolved environment plus a stage plan."""

    env: EnvironmentSpec
    stage_plan: tuple[tuple[str, tuple[str, ...]], ...]
    artifacts: ArtifactSpec
    timeout_minutes: int
    matrix_index: int

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "stage_plan": [[stage, list(commands)] for stage, commands in self.stage_plan],
            "artifacts": list(self.artifacts.patterns),
            "timeout_minutes": self.timeout_minutes,
            "matrix_index": self.matrix_index,
        }

    @staticmethod
    def from_dict(data: dict) -> "JobSpec":
        return JobSpec(
            env=EnvironmentSpec.from_dict(data["env"]),
            stage_plan=tuple(
                (stage, tuple(commands)) for stage, commands in data["stage_plan"]
            ),
            artifacts=ArtifactSpec(patterns=tuple(data.get("artifacts", ()))),
            timeout_minutes=int(data["timeout_minutes"]),
            matrix_index=int(data["matrix_index"]),
        )


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def _scalar_to_str(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _parse_env_map(raw: object, where: str) -> tuple[tuple[str, str], ...]:
    if raw is None:
        return ()
    if not isinstance(raw, dict):
        raise ConfigValidationError(f"{where} must be a map of NAME: value")
    pairs = []
    seen: set[str] = set()
    for name, value in raw.items():
        name = str(name)
        if not ENV_NAME_RE.match(name):
            raise ConfigValidationError(f"bad env var name in {where}: {name!r}")
        if name in seen:
            raise ConfigValidationError(f"duplicate env var in {where}: {name!r}")
        seen.add(name)
        if value is None or isinstance(value, (dict, list)):
            raise ConfigValidationError(f"{where}.{name} must be a scalar")
        pairs.append((name, _scalar_to_str(value)))
    return tuple(pairs)


def _parse_command_list(raw: object, stage: str) -> tuple[str, ...]:
    if raw is None:
        return ()
    if isinstance(raw, str):
        raw = [raw]
    if not isinstance(raw, list):
        raise ConfigValidationError(f"stage {stage!r} must be a list of command strings")
    commands = []
    for item in raw:
        if not isinstance(item, (str, int, float, bool)):
            raise ConfigValidationError(f"stage {stage!r} has a non-string command: {item!r}")
        text = _scalar_to_str(item).strip()
        if not text:
            raise ConfigValidationError(f"stage {stage!r} has an empty command")
        commands.append(text)
    return tuple(commands)


def _parse_environment(doc: dict, warnings: list[str]) -> EnvironmentSpec:
    os_value = doc.get("os", DEFAULT_OS)
    if not isinstance(os_value, str) or os_value not in OS_CHOICES:
        raise ConfigValidationError(
            f"os must be one of {', '.join(OS_CHOICES)}; got {os_value!r}"
        )
    dist = doc.get("dist")
    if dist is not None and not isinstance(dist, str):
        raise ConfigValidationError(f"dist must be a string; got {dist!r}")
    language = doc.get("language")
    if language is not None and not isinstance(language, str):
        raise ConfigValidationError(f"language must be a string; got {language!r}")

    language_version = doc.get("language_version")
    if language_version is not None:
        language_version = _scalar_to_str(language_version)

    # Listing-style shorthand: a top-level key named after the declared
    # language carries its version (`python: 3.6`). A shorthand for any
    # other known language is rejected rather than silently ignored.
    for key, value in doc.items():
        if key in KNOWN_TOP_LEVEL_KEYS or key not in KNOWN_LANGUAGES:
            continue
        if language is None or key != language:
            raise ConfigValidationError(
                f"version shorthand {key!r} does not match declared language {language!r}"
            )
        if language_version is not None:
            raise ConfigValidationError(
                f"language version given twice ({key!r} shorthand and language_version)"
            )
        language_version = _scalar_to_str(value)

    env_vars = _parse_env_map(doc.get("env"), "env")
    return EnvironmentSpec(
        os=os_value,
        dist=dist,
        language=language,
        language_version=language_version,
        env_vars=env_vars,
    )


def _merge_env(base: EnvironmentSpec, override: dict) -> EnvironmentSpec:
    """Shallow field replacement; env_vars merge key-wise over the base."""
    merged = base
    if "os" in override:
        merged = replace(merged, os=override["os"])
    if "dist" in override:
        merged = replace(merged, dist=override["dist"])
    if "language" in override:
        merged = replace(merged, language=override["language"])
    if "language_version" in override:
        merged = replace(merged, language_version=override["language_version"])
    if "env_vars" in override:
        env = dict(merged.env_vars)
        env.update(dict(override["env_vars"]))
        merged = replace(merged, env_vars=tuple(env.items()))
    return merged


def _parse_matrix_entry(raw: object, index: int, warnings: list[str]) -> dict:
    if not isinstance(raw, dict):
        raise ConfigValidationError(f"matrix[{index}] must be a map")
    override: dict = {}
    for key, value in raw.items():
        if key == "os":
            if not isinstance(value, str) or value not in OS_CHOICES:
                raise ConfigValidationError(
                    f"matrix[{index}].os must be one of {', '.join(OS_CHOICES)}"
                )
            override["os"] = value
        elif key in ("dist", "language", "language_version"):
            override[key] = _scalar_to_str(value) if value is not None else None
        elif key == "env":
            override["env_vars"] = _parse_env_map(value, f"matrix[{index}].env")
        else:
            warnings.append(f"unknown matrix key ignored: matrix[{index}].{key}")
    return override


def parse_config(text: str) -> PipelineConfig:
    """Parse and validate a pipeline document.

    Unknown top-level keys are collected as warnings, not errors, so that
    configs written for richer providers still parse.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ConfigSyntaxError(str(getattr(exc, "problem", None) or exc), line=line) from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigSyntaxError("top level must be a mapping")

    warnings: list[str] = []
    base_env = _parse_environment(doc, warnings)

    if "script" in doc and "run" in doc:
        raise ConfigValidationError("both 'script' and 'run' given; 'script' is an alias for 'run'")

    stage_lists = []
    for stage in CONFIG_STAGES:
        raw = doc.get(stage)
        if stage == "run" and raw is None:
            raw = doc.get("script")
        stage_lists.append((stage, _parse_command_list(raw, stage)))
    stages = StageScripts(commands=tuple(stage_lists))
    if not stages.nonempty_stages():
        raise ConfigValidationError("no stage commands: define at least one stage")

    raw_matrix = doc.get("matrix")
    entries: tuple[dict, ...] = ()
    if raw_matrix is not None:
        if not isinstance(raw_matrix, list):
            raise ConfigValidationError("matrix must be a list of maps")
        entries = tuple(
            _parse_matrix_entry(raw, i, warnings) for i, raw in enumerate(raw_matrix)
        )
    matrix = MatrixSpec(entries=entries)

    raw_artifacts = doc.get("artifacts")
    patterns: tuple[str, ...] = ()
    if raw_artifacts is not None:
        if isinstance(raw_artifacts, str):
            raw_artifacts = [raw_artifacts]
        if not isinstance(raw_artifacts, list):
            raise ConfigValidationError("artifacts must be a list of glob patterns")
        cleaned = []
        for pattern in raw_artifacts:
            if not isinstance(pattern, str) or not pattern.strip():
                raise ConfigValidationError(f"bad artifact pattern: {pattern!r}")
            pattern = pattern.strip()
            if pattern.startswith("/") or ".." in pattern.split("/"):
                raise ConfigValidationError(
                    f"artifact pattern must be workspace-relative: {pattern!r}"
                )
            cleaned.append(pattern)
        patterns = tuple(cleaned)
    artifacts = ArtifactSpec(patterns=patterns)

    timeout = doc.get("timeout_minutes", DEFAULT_TIMEOUT_MINUTES)
    if not isinstance(timeout, int) or isinstance(timeout, bool) or timeout < 1:
        raise ConfigValidationError(f"timeout_minutes must be a positive integer; got {timeout!r}")

    for key in doc:
        if key not in KNOWN_TOP_LEVEL_KEYS and key not in KNOWN_LANGUAGES:
            warnings.append(f"unknown key ignored: {key}")

    cfg = PipelineConfig(
        base_env=base_env,
        stages=stages,
        matrix=matrix,
        artifacts=artifacts,
        timeout_minutes=timeout,
        warnings=tuple(warnings),
    )
    # Expansion also enforces the no-duplicate-environments invariant.
    expand_matrix(cfg)
    return cfg


def effective_stages(cfg: PipelineConfig) -> tuple[str, ...]:
    """The stages a job will execute: implicit info first, then every
    configured stage with commands, in canonical order."""
    return ("info",) + cfg.stages.nonempty_stages()


def expand_matrix(cfg: PipelineConfig) -> list[JobSpec]:
    """One JobSpec per matrix entry (or a single one when no matrix),
    base environment overridden field-wise by each entry."""
    plan = tuple(
        (stage, cfg.stages.get(stage)) for stage in cfg.stages.nonempty_stages()
    )
    overrides = cfg.matrix.entries or ({},)
    specs = []
    seen_envs: set[tuple] = set()
    for index, override in enumerate(overrides):
        env = _merge_env(cfg.base_env, override)
        key = (env.os, env.dist, env.language, env.language_version, tuple(sorted(env.env_vars)))
        if key in seen_envs:
            raise ConfigValidationError(
                f"matrix[{index}] expands to a duplicate environment"
            )
        seen_envs.add(key)
        specs.append(
            JobSpec(
                env=env,
                stage_plan=plan,
                artifacts=cfg.artifacts,
                timeout_minutes=cfg.timeout_minutes,
                matrix_index=index,
            )
        )
    return specs


def lint(cfg: PipelineConfig) -> list[Diagnostic]:
    """Non-fatal reproducibility warnings."""
    diagnostics = []
    envs = [spec.env for spec in expand_matrix(cfg)]

    unpinned = sorted(
        {env.language for env in envs if env.language and not env.language_version}
    )
    for language in unpinned:
        diagnostics.append(
            Diagnostic(
                "unpinned-toolchain",
                f"language {language!r} has no pinned version; runs may drift across images",
            )
        )

    if len({env.os for env in envs}) == 1:
        diagnostics.append(
            Diagnostic(
                "single-os-matrix",
                f"all jobs target {envs[0].os}; results are untested on other platforms",
            )
        )

    has_run = bool(cfg.stages.get("run"))
    if has_run and not cfg.artifacts.patterns:
        diagnostics.append(
            Diagnostic(
                "no-artifacts",
                "a run stage exists but no artifacts are declared; results will not be preserved",
            )
        )
    if not has_run:
        diagnostics.append(
            Diagnostic("no-run-stage", "no run stage: nothing marks the experiment itself")
        )
    return diagnostics


def serialize_config(cfg: PipelineConfig) -> str:
    """Canonical document form; parse(serialize(parse(text))) is a fixed point."""
    doc: dict = {"os": cfg.base_env.os}
    if cfg.base_env.dist is not None:
        doc["dist"] = cfg.base_env.dist
    if cfg.base_env.language is not None:
        doc["language"] = cfg.base_env.language
    if cfg.base_env.language_version is not None:
        doc["language_version"] = cfg.base_env.language_version
    if cfg.base_env.env_vars:
        doc["env"] = dict(cfg.base_env.env_vars)
    for stage in CONFIG_STAGES:
        commands = cfg.stages.get(stage)
        if commands:
            doc[stage] = list(commands)
    if cfg.matrix.entries:
        rendered = []
        for entry in cfg.matrix.entries:
            item: dict = {}
            for field_name in ("os", "dist", "language", "language_version"):
                if field_name in entry:
                    item[field_name] = entry[field_name]
            if "env_vars" in entry:
                item["env"] = dict(entry["env_vars"])
            rendered.append(item)
        doc["matrix"] = rendered
    if cfg.artifacts.patterns:
        doc["artifacts"] = list(cfg.artifacts.patterns)
    doc["timeout_minutes"] = cfg.timeout_minutes
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)
