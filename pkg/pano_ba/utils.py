from __future__ import annotations
from typing import Any, Dict, Iterable, Iterator, Tuple
from pathlib import Path
from contextlib import contextmanager
import hashlib
import os
import tempfile

import yaml

from .errors import ConfigError, DataError, log_and_reraise


def ensure_dir(path: Path | str) -> None:
    Path(path).mkdir(parents=True, exist_ok=True)


@log_and_reraise(ConfigError)
def read_yaml(path: str | Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


@log_and_reraise(DataError)
def read_kv(path: str | Path) -> Dict[str, str]:
    """
    Parse a flat `key = value` text file. `#` starts a comment.
    """
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


@contextmanager
def atomic_write(path: Path | str, mode: str = "w", **open_kw) -> Iterator[Any]:
    """
    Write to a temp file next to `path`, then rename over it.
    A failed write leaves any previous file untouched.
    """
    dst = Path(path)
    ensure_dir(dst.parent)
    fd, tmp = tempfile.mkstemp(prefix=f".{dst.name}.", suffix=".tmp", dir=dst.parent)
    os.close(fd)
    try:
        with open(tmp, mode, **open_kw) as f:
            yield f
        os.replace(tmp, dst)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def file_digest(path: Path | str, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def chunked_ranges(n: int, size: int) -> Iterator[Tuple[int, int]]:
    if size <= 0:
        raise ValueError("size must be > 0")
    for start in range(0, n, size):
        yield start, min(start + size, n)


def parse_window(text: str | None) -> Tuple[float, float] | None:
    if text is None or text == "":
        return None
    try:
        a, b = str(text).split(":", 1)
        t0, t1 = float(a), float(b)
    except ValueError as e:
        raise ConfigError(f"Invalid window {text!r}; expected T0:T1") from e
    if not t1 > t0:
        raise ConfigError(f"Invalid window {text!r}; need T1 > T0")
    return t0, t1


def parse_map_size(text: str | None) -> Tuple[int, int] | None:
    if text is None or text == "":
        return None
    try:
        w, h = str(text).lower().split("x", 1)
        return int(w), int(h)
    except ValueError as e:
        raise ConfigError(f"Invalid map size {text!r}; expected WxH") from e


def parse_float_list(text: str | Iterable[float] | None) -> list[float]:
    if text is None:
        return []
    if not isinstance(text, str):
        return [float(v) for v in text]
    return [float(p) for p in text.split(",") if p.strip()]


def write_manifest(out_dir: Path | str, command: str, params: Dict[str, Any],
                   files: Iterable[Path | str], version: str) -> Path:
    """
    YAML record of a run: resolved parameters plus a sha256 per written
    file, enough to reproduce and verify it.
    """
    out = Path(out_dir)
    entries = {}
    for p in files:
        p = Path(p)
        try:
            rel = str(p.relative_to(out))
        except ValueError:
            rel = str(p)
        entries[rel] = file_digest(p)
    doc = {
        "command": command,
        "version": version,
        "params": {k: _plain(v) for k, v in params.items()},
        "files": entries,
    }
    path = out / "manifest.yaml"
    with atomic_write(path) as f:
        yaml.safe_dump(doc, f, sort_keys=True)
    return path


def _plain(v: Any) -> Any:
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if hasattr(v, "item"):  # numpy scalars
        return v.item()
    return v
