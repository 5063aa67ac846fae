"""Key-value configuration files.

One ``key = value`` pair per line; blank lines and ``#`` comments are
ignored.  Recognized keys::

    repo.dir            repo.id             mode            variant
    init                expected_root       mirror.dir
    service.addr        service.key_hex
    push.on_barrier     push.every_n_commits  push.on_close
    buffer.cap_bytes
    region.N.prefix     region.N.stack
"""

import os
import re

from .errors import ConfigError
from .objects import is_object_id
from .regions import Region, parse_stack
from .vfs import PushPolicy, ShieldConfig

_REGION_KEY = re.compile(r"region\.(\d+)\.(prefix|stack)$")
_SIMPLE_KEYS = {
    "repo.dir", "repo.id", "mode", "variant", "init", "expected_root", "mirror.dir",
    "service.addr", "service.key_hex", "push.on_barrier", "push.every_n_commits",
    "push.on_close", "buffer.cap_bytes",
}


def parse_config_text(text):
    """Return the raw ``key -> value`` mapping, rejecting unknown keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in _SIMPLE_KEYS and not _REGION_KEY.match(key):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _bool(key, value):
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _regions(raw):
    indexed = {}
    for key, value in raw.items():
        m = _REGION_KEY.match(key)
        if m:
            indexed.setdefault(int(m.group(1)), {})[m.group(2)] = value
    regions = []
    for n in sorted(indexed):
        entry = indexed[n]
        if "prefix" not in entry:
            raise ConfigError(f"region.{n} has no prefix")
        stack = parse_stack(entry.get("stack", "passthrough"))
        regions.append(Region(entry["prefix"], stack, f"user-{n}"))
    return regions


def config_from_mapping(raw, repo_dir=None, **overrides):
    """Build a :class:`ShieldConfig`; ``repo_dir`` and overrides win over the file."""
    repo = repo_dir or raw.get("repo.dir")
    if not repo:
        raise ConfigError("no repository directory given (repo.dir)")
    push = PushPolicy(
        on_barrier=_bool("push.on_barrier", raw.get("push.on_barrier", "true")),
        every_n_commits=(None if raw.get("push.every_n_commits", "off").lower() == "off"
                         else _int("push.every_n_commits", raw["push.every_n_commits"])),
        on_close=_bool("push.on_close", raw.get("push.on_close", "false")),
    )
    expected = raw.get("expected_root")
    if expected and not is_object_id(expected):
        raise ConfigError("expected_root must be a 40-character hex object id")
    init = raw.get("init", "auto")
    if init.startswith("clone(") and init.endswith(")"):
        expected = expected or init[6:-1]
        init = "clone"
    key_hex = raw.get("service.key_hex")
    try:
        key = bytes.fromhex(key_hex) if key_hex else None
    except ValueError:
        raise ConfigError("service.key_hex is not valid hex") from None
    kwargs = dict(
        repo_dir=repo,
        variant=raw.get("variant", "Inte-fine-disk"),
        mode=raw.get("mode"),
        init=init,
        expected_root=expected,
        repo_id=raw.get("repo.id"),
        push=push,
        regions=_regions(raw),
        mirror_dir=raw.get("mirror.dir"),
        service_addr=raw.get("service.addr"),
        service_key=key,
    )
    if "buffer.cap_bytes" in raw:
        kwargs["buffer_cap_bytes"] = _int("buffer.cap_bytes", raw["buffer.cap_bytes"])
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ShieldConfig(**kwargs)


def load_config(path, repo_dir=None, **overrides):
    try:
        with open(os.path.expanduser(path), encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return config_from_mapping(parse_config_text(text), repo_dir, **overrides)
