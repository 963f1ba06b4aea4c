"""Config files, run reports, checkpoints and CSV exports.

Every file written here starts with a version line ``#! atm-lab <kind> <major>.<minor>``.
Readers refuse a different major version.

Config / report text format::

    # comment
    key = value
    dims.l = 16
    [section]          # only keys outside sections or under [config] are config keys

Checkpoint: version line, one JSON header line, then each parameter as
little-endian float64 in header order.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .atm import MemoryBank
from .conditioning import DetailBranch, FrozenEncoder, SemanticQueryBank
from .atm import GateClassifier
from .pipeline import ARMS, DecoderHead, Dims, TrainConfig, TrainState

FORMAT_VERSION = (1, 0)


class ConfigError(ValueError):
    """Malformed config text or an unknown / badly typed key."""


class CheckpointError(IOError):
    """Unreadable, corrupt or version-mismatched file."""


def version_line(kind: str) -> str:
    return f"#! atm-lab {kind} {FORMAT_VERSION[0]}.{FORMAT_VERSION[1]}"


def check_version_line(line: str, kind: str, source: str, error=CheckpointError) -> None:
    parts = line.strip().split()
    if len(parts) != 4 or parts[:2] != ["#!", "atm-lab"]:
        raise error(f"{source}: missing version line (expected {version_line(kind)!r})")
    if parts[2] != kind:
        raise error(f"{source}: file holds a {parts[2]!r}, expected {kind!r}")
    try:
        major = int(parts[3].split(".")[0])
    except ValueError:
        raise error(f"{source}: unreadable version {parts[3]!r}") from None
    if major != FORMAT_VERSION[0]:
        raise error(f"{source}: major version {major} not supported (reader is {FORMAT_VERSION[0]})")


def atomic_write(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "\n", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# ---------------------------------------------------------------------------
# config


def parse_config_text(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """``key -> (raw value, line number)`` for every config key in ``text``."""
    out: dict[str, tuple[str, int]] = {}
    section: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if lineno == 1 and line.startswith("#!"):
            kind = line.split()[2] if len(line.split()) > 2 else ""
            check_version_line(line, kind, source, ConfigError)
            continue
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if section not in (None, "config"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "#" in value:
            value = value.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} repeated (first on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig) if f.name != "dims"}
_DIMS_KEYS = {f.name for f in fields(Dims)}


def _convert(key: str, value: str, kind: str, where: str):
    try:
        if kind in ("int", int):
            return int(value, 0)
        if kind in ("float", float):
            return float(value)
        if kind.startswith("tuple"):
            items = [v.strip() for v in value.split(",") if v.strip()]
            unknown = [v for v in items if v not in ARMS]
            if unknown:
                raise ValueError(f"unknown arm(s) {unknown}; valid arms: {', '.join(ARMS)}")
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {value!r} for key {key!r}: {exc}") from None
    raise ConfigError(f"{where}: key {key!r} has unsupported type {kind}")


def apply_settings(config: TrainConfig, settings: dict[str, tuple[str, int]], source: str) -> TrainConfig:
    flat = asdict(config)
    dims = flat.pop("dims")
    for key, (value, lineno) in settings.items():
        where = f"{source}:{lineno}" if lineno else source
        if key.startswith("dims."):
            name = key[5:]
            if name not in _DIMS_KEYS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            dims[name] = _convert(key, value, "int", where)
        elif key in _CONFIG_TYPES:
            flat[key] = _convert(key, value, _CONFIG_TYPES[key], where)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return TrainConfig(dims=Dims(**dims), **flat)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_overrides(pairs: Iterable[str]) -> dict[str, tuple[str, int]]:
    out = {}
    for k, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ConfigError(f"--set #{k}: expected KEY=VALUE, got {pair!r}")
        key, value = (p.strip() for p in pair.split("=", 1))
        out[key] = (value, 0)
    return out


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def config_lines(config: TrainConfig) -> list[str]:
    flat = asdict(config)
    dims = flat.pop("dims")
    lines = [f"{k} = {_fmt(v)}" for k, v in flat.items()]
    lines += [f"dims.{k} = {_fmt(v)}" for k, v in dims.items()]
    return lines


def config_text(config: TrainConfig) -> str:
    return "\n".join([version_line("config"), *config_lines(config)]) + "\n"


# ---------------------------------------------------------------------------
# run report


def report_text(config: TrainConfig, sections: dict[str, dict[str, object]], timing: dict[str, float],
                artifact_version: str) -> str:
    """Render a report; ``[timing]`` is the only section that varies between identical runs."""
    lines = [version_line("report"), f"# artifact {artifact_version}", "[config]", *config_lines(config)]
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
    lines.append("[timing]")
    lines += [f"{k} = {v:.3f}" for k, v in timing.items()]
    return "\n".join(lines) + "\n"


def report_body(text: str) -> str:
    """Report text without the wall-clock section."""
    out, skipping = [], False
    for line in text.splitlines():
        if line.startswith("["):
            skipping = line == "[timing]"
        if not skipping:
            out.append(line)
    return "\n".join(out)


def read_report_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if line.startswith("["):
            current = sections.setdefault(line.strip()[1:-1], {})
        elif current is not None and "=" in line:
            k, v = line.split("=", 1)
            current[k.strip()] = v.strip()
    return sections


# ---------------------------------------------------------------------------
# checkpoint


def checkpoint_bytes(state: TrainState) -> bytes:
    params = state.params()
    header = {
        "arm": state.arm,
        "stage": state.stage,
        "finished": state.finished,
        "step": state.step,
        "config": {k: _fmt(v) for k, v in (line.split(" = ", 1) for line in config_lines(state.config))},
        "alpha": state.bank.alpha,
        "epsilon_norm": state.bank.epsilon_norm,
        "frozen": state.bank.frozen,
        "tokens_per_condition": state.detail.tokens_per_condition,
        "params": [[name, *arr.shape] for name, arr in params.items()],
    }
    head = (version_line("checkpoint") + "\n" + json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.values())
    return head + body


def save_checkpoint(state: TrainState, path) -> Path:
    return atomic_write(path, checkpoint_bytes(state))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from None
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        check_version_line(blob[:first].decode("utf-8"), "checkpoint", str(path))
        header = json.loads(blob[first + 1:second].decode("utf-8"))
        specs = [(str(n), int(r), int(c)) for n, r, c in header["params"]]
        settings = {k: (str(v), 0) for k, v in header["config"].items()}
    except CheckpointError:
        raise
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    body = blob[second + 1:]
    expected = 8 * sum(r * c for _, r, c in specs)
    if len(body) != expected:
        raise CheckpointError(f"{path}: body holds {len(body)} bytes, header promises {expected}")
    arrays, offset = {}, 0
    for name, r, c in specs:
        n = r * c
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(r, c).astype(np.float64)
        offset += 8 * n
    try:
        config = apply_settings(TrainConfig(), settings, str(path))
        n_items = config.dims.n
        state = TrainState(
            config=config,
            arm=header["arm"],
            qbank=SemanticQueryBank(arrays["q0"]),
            encoder=FrozenEncoder(arrays["encoder.w_q"], arrays["encoder.w_x"], arrays["encoder.b"]),
            detail=DetailBranch(arrays["detail.w_v"], int(header["tokens_per_condition"])),
            bank=MemoryBank([arrays[f"memory.{i}"] for i in range(n_items)], alpha=float(header["alpha"]),
                            epsilon_norm=float(header["epsilon_norm"]), frozen=bool(header["frozen"])),
            gate=GateClassifier(arrays["gate.w1"], arrays["gate.b1"], arrays["gate.w2"], arrays["gate.b2"]),
            decoder=DecoderHead(arrays["decoder.w1"], arrays["decoder.b1"], arrays["decoder.w2"],
                                arrays["decoder.b2"]),
            stage=int(header["stage"]),
            finished=bool(header["finished"]),
            step=int(header["step"]),
        )
    except (KeyError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint: {exc}") from None
    if state.arm not in ARMS:
        raise CheckpointError(f"{path}: unknown arm {state.arm!r}")
    return state


# ---------------------------------------------------------------------------
# CSV exports


def _csv(rows: Iterable[Iterable[object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def memory_item_csv(bank: MemoryBank, task: int) -> str:
    item = bank.item(task)
    rows = [["n", "m", "c", "item"], [bank.n, bank.m, bank.c, task]]
    rows += [[float(v) for v in row] for row in item]
    return version_line("memory") + "\n" + _csv(rows)


def write_memory(bank: MemoryBank, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [atomic_write(out_dir / f"memory_{i}.csv", memory_item_csv(bank, i)) for i in range(bank.n)]


def read_memory(out_dir, alpha: float = 0.1, epsilon_norm: float = 1e-8) -> MemoryBank:
    """Rebuild a bank from ``memory_<i>.csv`` files; the result is marked frozen."""
    out_dir = Path(out_dir)
    items: dict[int, np.ndarray] = {}
    expected_n = None
    for path in sorted(out_dir.glob("memory_*.csv")):
        text = path.read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines:
            raise CheckpointError(f"{path}: empty file")
        check_version_line(lines[0], "memory", str(path))
        rows = list(csv.reader(lines[1:]))
        try:
            n, m, c, task = (int(v) for v in rows[1])
            data = np.array([[float(v) for v in r] for r in rows[2:]], dtype=np.float64)
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed memory dump: {exc}") from None
        if data.shape != (m, c):
            raise CheckpointError(f"{path}: header says {m}x{c}, found {data.shape}")
        if expected_n is not None and n != expected_n:
            raise CheckpointError(f"{path}: item count {n} disagrees with {expected_n}")
        expected_n = n
        items[task] = data
    if expected_n is None or sorted(items) != list(range(expected_n)):
        raise CheckpointError(f"{out_dir}: incomplete memory export")
    return MemoryBank([items[i] for i in range(expected_n)], alpha, epsilon_norm, frozen=True)


def table_csv(kind: str, header: Iterable[str], rows: Iterable[Iterable[object]]) -> str:
    return version_line(kind) + "\n" + _csv([list(header), *rows])


def read_table_csv(path, kind: str) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CheckpointError(f"{path}: empty file")
    check_version_line(lines[0], kind, str(path))
    rows = list(csv.reader(lines[1:]))
    return rows[0], rows[1:]
