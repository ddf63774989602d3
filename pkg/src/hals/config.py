"""Plain-text ``key=value`` files used for configs, sidecars and manifests."""

from __future__ import annotations

from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = val.strip()
    return out


def format_kv(d: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    for k, v in d.items():
        if v is None:
            v = ""
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def write_kv(path, d: dict, header: str | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(format_kv(d, header))
    tmp.replace(path)


def as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def as_optional_float(v):
    if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
        return None
    return float(v)


def as_optional_int(v):
    if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
        return None
    return int(v)
