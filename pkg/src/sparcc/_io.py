"""Small file helpers: atomic writes and the flat ``key = value`` format."""

from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path


@contextmanager
def atomic_open(path, mode="w", newline=""):
    """Write to a temporary sibling and rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, newline=newline, encoding="utf-8") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def read_keyvalue(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, items: dict[str, object], header: str | None = None) -> None:
    with atomic_open(path) as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for key, value in items.items():
            fh.write(f"{key} = {value}\n")


def format_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def parse_floats(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    return [float(v) for v in text.split(",")]
