"""Atomic CSV / whitespace-data / JSON writers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def fmt(value) -> str:
    """17 significant digits for floats (round-trip exact); ints and strings verbatim."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g")
    if hasattr(value, "dtype"):
        return fmt(value.item())
    if value is None:
        return ""
    return str(value)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _atomic_write(path: Path, text: str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows) -> Path:
    _atomic_write(path, csv_text(header, rows))
    return Path(path)


def write_dat(path, header, rows, figure: str) -> Path:
    """Whitespace-separated columns for plotting tools; ``figure`` goes in a comment."""
    lines = [f"# figure: {figure}", "# " + " ".join(header)]
    for row in rows:
        lines.append(" ".join(fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")
    return Path(path)


def write_json(path, payload) -> Path:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return Path(path)
