"""Flat ``key = value`` configuration files.

One setting per line; ``#`` starts a comment. Values are parsed as booleans
(``true``/``false``), ``none``, integers, floats, comma-separated tuples of
those, or else kept as strings.
"""
from __future__ import annotations

from pathlib import Path

from .estimator import HSEClassifier

# every estimator parameter except the taxonomy object, plus run-level settings
RUN_KEYS = {"data_dir", "out_dir", "model_dir", "variant", "mode", "seed", "level", "index",
            "split", "branching", "image_size", "counts", "noise", "gradcheck_tol"}
MODEL_KEYS = set(HSEClassifier().get_params()) - {"taxonomy", "random_state"}
KNOWN_KEYS = RUN_KEYS | MODEL_KEYS


class ConfigFileError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, source: str = "<config>", strict: bool = True) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if strict and key not in KNOWN_KEYS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path, strict: bool = True) -> dict:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path), strict)


def format_config(settings: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        if isinstance(v, (tuple, list)):
            return ",".join(fmt(x) for x in v) + ("," if len(v) == 1 else "")
        return str(v)
    return "".join(f"{k} = {fmt(settings[k])}\n" for k in sorted(settings))


def model_params(settings: dict) -> dict:
    """The subset of ``settings`` that are estimator parameters."""
    params = {k: v for k, v in settings.items() if k in MODEL_KEYS}
    if "trunk_widths" in params and not isinstance(params["trunk_widths"], tuple):
        params["trunk_widths"] = (params["trunk_widths"],)
    return params
