"""Configuration, test persistence, CSV export and run manifests."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .raster import ShapeKind, encode_pgm, render_tile
from .testgen import FeatureName, FeatureRole, RpmTest, SeqSpec, TileDescriptor

MANIFEST_NAME = "manifest.txt"
TEST_FORMAT = "fluidrpm-test-1"
SEED_ENV = "FLUIDRPM_SEED"


class ConfigError(ValueError):
    """Bad configuration value or key (maps to exit code 1)."""


class LoadError(RuntimeError):
    """Missing or corrupt file while loading a stored test."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    t: int = 5
    n: int = 4
    sigma: float = 0.2
    lr: float = 3e-4
    dis_ratio: float = 0.7
    lr_bound: float = 3e-4
    rho: float = 0.9
    eps: float = 1e-8
    steps: int = 200
    seed: int = 0
    version: str = __version__

    def validate(self) -> "RunConfig":
        if self.t < 2:
            raise ConfigError(f"t must be >= 2, got {self.t}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if min(self.lr, self.lr_bound) < 0 or self.dis_ratio < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.rho < 1:
            raise ConfigError(f"rho must be in [0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        return self

    def train_config(self):
        from .optim import TrainConfig

        return TrainConfig(self.sigma, self.lr, self.dis_ratio, self.lr_bound, self.rho, self.eps)

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: Any) -> Any:
    kind = _CONFIG_TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def parse_config(
    overrides: Mapping[str, Any] | None = None,
    config_file: str | Path | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Resolve defaults < environment seed < config file < explicit overrides."""
    env = os.environ if env is None else env
    merged: dict[str, Any] = {}
    if env.get(SEED_ENV):
        merged["seed"] = env[SEED_ENV]
    if config_file is not None:
        merged.update(read_config_file(config_file))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(_CONFIG_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    return cfg.validate()


# ---------------------------------------------------------------------------
# stored tests
# ---------------------------------------------------------------------------


def _fmt_desc(d: TileDescriptor) -> str:
    return (
        f"color={d.color!r} positions={','.join(map(str, d.positions))} "
        f"size={d.size!r} shape={d.shape.value} number={d.number}"
    )


def _parse_desc(text: str) -> TileDescriptor:
    kv = dict(item.split("=", 1) for item in text.split())
    return TileDescriptor(
        color=float(kv["color"]),
        positions=tuple(int(p) for p in kv["positions"].split(",")),
        size=float(kv["size"]),
        shape=ShapeKind(kv["shape"]),
        number=int(kv["number"]),
    )


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_test(test: RpmTest, directory: str | Path, hide_answer: bool = False) -> Path:
    """Write PGM images plus a key=value manifest; returns the manifest path.

    With ``hide_answer`` the correct index is left out of the manifest.
    """
    root = Path(directory)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    (root / "options").mkdir(parents=True, exist_ok=True)
    spec = test.spec
    lines = [
        f"format = {TEST_FORMAT}",
        f"t = {spec.t}",
        f"n = {spec.n}",
        f"seed = {'' if spec.seed is None else spec.seed}",
        f"increasing = {int(spec.increasing)}",
    ]
    lines += [f"role.{f.value} = {spec.roles[f].value}" for f in FeatureName]
    if not hide_answer and test.correct is not None:
        lines.append(f"correct = {test.correct}")
    for group, descs in (("tiles", test.tiles), ("options", test.options)):
        for k, d in enumerate(descs):
            name = f"{group}/{k:02d}.pgm"
            blob = encode_pgm(render_tile(d))
            (root / name).write_bytes(blob)
            lines.append(f"{group}.{k:02d} = {_fmt_desc(d)}")
            lines.append(f"sha256.{group}.{k:02d} = {sha256(blob)}")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_test(directory: str | Path, verify: bool = True) -> RpmTest:
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise LoadError(f"{manifest}: missing test manifest")
    try:
        kv = read_config_file(manifest)
    except ConfigError as exc:
        raise LoadError(f"{manifest}: {exc}") from None
    if kv.get("format") != TEST_FORMAT:
        raise LoadError(f"{manifest}: unsupported format {kv.get('format')!r}")
    try:
        t, n = int(kv["t"]), int(kv["n"])
        roles = {f: FeatureRole(kv[f"role.{f.value}"]) for f in FeatureName}
        spec = SeqSpec(roles, t=t, n=n, seed=int(kv["seed"]) if kv["seed"] else None, increasing=kv["increasing"] == "1")
        tiles = [_parse_desc(kv[f"tiles.{k:02d}"]) for k in range(t)]
        options = [_parse_desc(kv[f"options.{k:02d}"]) for k in range(n)]
        correct = int(kv["correct"]) if "correct" in kv else None
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{manifest}: malformed entry ({exc})") from None
    if verify:
        for group, count in (("tiles", t), ("options", n)):
            for k in range(count):
                path = root / group / f"{k:02d}.pgm"
                if not path.is_file():
                    raise LoadError(f"{path}: missing image")
                if sha256(path.read_bytes()) != kv.get(f"sha256.{group}.{k:02d}"):
                    raise LoadError(f"{path}: checksum mismatch")
    return RpmTest(tiles, options, correct, spec)


# ---------------------------------------------------------------------------
# CSV and manifests
# ---------------------------------------------------------------------------


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    if v is None:
        return ""
    return str(v)


def write_results(
    records: Iterable[Mapping[str, Any]],
    path: str | Path,
    columns: Sequence[str],
    summary: Mapping[str, Any] | None = None,
) -> Path:
    """Header row, one row per record in ``columns`` order, optional summary row."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([format_value(rec.get(c)) for c in columns])
        if summary is not None:
            w.writerow([format_value(summary.get(c)) for c in columns])
    return path


def file_checksums(paths: Iterable[str | Path]) -> dict[str, str]:
    return {str(p): sha256(Path(p).read_bytes()) for p in paths}


def write_manifest(
    path: str | Path,
    command: str,
    config: Mapping[str, Any],
    outputs: Iterable[str | Path] = (),
    extra: Mapping[str, Any] | None = None,
) -> Path:
    """Record everything needed to re-run ``command`` and check its outputs."""
    manifest = {
        "command": command,
        "version": __version__,
        "config": dict(config),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": file_checksums(outputs),
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path
