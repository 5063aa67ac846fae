"""Regions and storage providers.

A :class:`RegionTable` maps host path prefixes to provider stacks.  Each
stack is an ordered tuple of provider kinds; writes traverse it in listed
order and reads in reverse, so ``("encryption", "integrity")`` seals the
plaintext first and then records a checksum of the ciphertext.

:class:`RegionFS` is the only component that touches host files on behalf
of the shield.  Everything above it (the object store, the secure buffers)
sees plain bytes.
"""

import contextlib
import hashlib
import hmac
import os
import struct
import time
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .counters import Counters
from .errors import ConfigError, IntegrityError, NotFoundError

PASSTHROUGH = "passthrough"
INTEGRITY = "integrity"
ENCRYPTION = "encryption"
PROVIDER_KINDS = (PASSTHROUGH, INTEGRITY, ENCRYPTION)

BLOCK_SIZE = 4096
NONCE_SIZE = 12
TAG_SIZE = 16
MAGIC = b"TCLE"
FORMAT_VERSION = 1
HEADER = struct.Struct(">4sBQQ")


def validate_stack(stack):
    """Normalize a provider stack and reject invalid orderings."""
    stack = tuple(stack)
    if not stack:
        return (PASSTHROUGH,)
    for kind in stack:
        if kind not in PROVIDER_KINDS:
            raise ConfigError(f"unknown provider kind {kind!r}")
    if len(set(stack)) != len(stack):
        raise ConfigError(f"duplicate provider in stack {stack}")
    if PASSTHROUGH in stack and len(stack) > 1:
        raise ConfigError("passthrough cannot be combined with other providers")
    if ENCRYPTION in stack and INTEGRITY in stack:
        if stack.index(ENCRYPTION) > stack.index(INTEGRITY):
            raise ConfigError("encryption must precede integrity on the write path")
    return stack


def parse_stack(text):
    """Parse ``"encryption+integrity"`` or ``"encryption,integrity"``."""
    parts = [p.strip() for p in text.replace(",", "+").split("+") if p.strip()]
    return validate_stack(parts)


def _canonical_prefix(path):
    if not os.path.isabs(path):
        raise ConfigError(f"region prefix must be absolute: {path!r}")
    return os.path.normpath(path)


@dataclass(frozen=True)
class Region:
    prefix: str
    stack: tuple
    region_id: str
    base: str = None
    meta_path: str = None

    def __post_init__(self):
        object.__setattr__(self, "prefix", _canonical_prefix(self.prefix))
        object.__setattr__(self, "stack", validate_stack(self.stack))
        if self.base is None:
            object.__setattr__(self, "base", self.prefix)
        if self.meta_path is None and INTEGRITY in self.stack:
            object.__setattr__(self, "meta_path", self.prefix + ".tical-meta")

    def covers(self, path):
        if self.prefix == "/":
            return True
        return path == self.prefix or path.startswith(self.prefix + "/")

    def relpath(self, path):
        return os.path.relpath(path, self.base)


DEFAULT_REGION = Region("/", (PASSTHROUGH,), "default")


class RegionTable:
    """Longest-prefix routing from host paths to regions."""

    def __init__(self, regions=()):
        self._regions = []
        for r in regions:
            self.add(r)

    def add(self, region):
        for existing in self._regions:
            if existing.prefix == region.prefix:
                raise ConfigError(f"duplicate region prefix {region.prefix}")
        self._regions.append(region)
        # Longest prefix first; resolve() takes the first match.
        self._regions.sort(key=lambda r: len(r.prefix), reverse=True)

    @property
    def regions(self):
        return list(self._regions)

    def resolve(self, path):
        path = os.path.normpath(os.path.abspath(path))
        for region in self._regions:
            if region.covers(path):
                return region
        return DEFAULT_REGION


@dataclass(frozen=True)
class Variant:
    name: str
    mode: str
    region_a: tuple
    region_b: tuple
    work: tuple
    in_memory: bool = False


_I, _E, _P = (INTEGRITY,), (ENCRYPTION,), (PASSTHROUGH,)

VARIANTS = {
    v.name: v
    for v in [
        Variant("Nopr-coarse-disk", "coarse", _P, _P, _P),
        Variant("Nopr-fine-disk", "fine", _P, _P, _P),
        Variant("Inte-fine-disk", "fine", _I, _P, _P),
        Variant("Encr-fine-disk", "fine", _I, _E, _E),
        Variant("Encr-coarse-disk", "coarse", _I, _E, _E),
        Variant("Inte-coarse-disk", "coarse", _I, _P, _P),
        Variant("Inte-fine-mem", "fine", _I, _P, _P, in_memory=True),
    ]
}


def get_variant(name):
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


GIT_A_FILES = ("refs", "logs", "HEAD", "tical-stage", "tical-repo-id")


def configure_git_metadata_regions(repo_root, variant):
    """Region entries protecting a GITFS repository rooted at ``repo_root``.

    Region A holds refs, reflogs, HEAD and the stage file; region B holds
    the object database and the rest of ``.git``.  The working tree gets
    its own region so encrypted variants also keep file contents sealed.
    """
    v = variant if isinstance(variant, Variant) else get_variant(variant)
    repo_root = os.path.normpath(os.path.abspath(repo_root))
    git = os.path.join(repo_root, ".git")
    regions = [
        Region(os.path.join(git, name), v.region_a, "git-a", base=git,
               meta_path=os.path.join(git, "tical-meta-a"))
        for name in GIT_A_FILES
    ]
    regions.append(Region(git, v.region_b, "git-b", base=git,
                          meta_path=os.path.join(git, "tical-meta-b")))
    regions.append(Region(repo_root, v.work, "work", base=repo_root,
                          meta_path=os.path.join(git, "tical-meta-work")))
    return regions


def derive_key(key, label):
    return hmac.new(key, label.encode(), hashlib.sha256).digest()


@dataclass
class MetaEntry:
    sha256: str
    length: int
    version: int


class IntegrityMetadata:
    """Per-region checksum map, MAC-authenticated as a whole.

    The map is loaded once, verified, and from then on the in-memory copy
    is authoritative.  Reads outside a batch re-read the on-disk file and
    require it to match, so a tampered or reverted metadata file is caught
    even within one session.
    """

    def __init__(self, region, mac_key, fs):
        self.region = region
        self.path = region.meta_path
        self._key = derive_key(mac_key, "integrity-region:" + region.region_id)
        self._fs = fs
        self.entries = None
        self.dirty = False

    def _mac(self, body):
        return hmac.new(self._key, body, hashlib.sha256).hexdigest()

    def serialize(self):
        lines = [
            f"{p}\t{e.sha256}\t{e.length}\t{e.version}\n"
            for p, e in sorted(self.entries.items())
        ]
        body = "".join(lines).encode()
        return body + f"mac\t{self._mac(body)}\n".encode()

    def parse(self, data):
        try:
            text = data.decode("utf-8")
            if not text.endswith("\n"):
                raise ValueError("truncated")
            lines = text.split("\n")[:-1]
            body = "".join(line + "\n" for line in lines[:-1])
            tag, _, mac = lines[-1].partition("\t")
            if tag != "mac":
                raise ValueError("missing mac line")
            if not hmac.compare_digest(mac, self._mac(body.encode())):
                raise IntegrityError(f"integrity metadata MAC mismatch: {self.path}")
            entries = {}
            for line in body.splitlines():
                p, h, length, version = line.split("\t")
                if len(h) != 64 or p in entries:
                    raise ValueError("bad entry")
                entries[p] = MetaEntry(h, int(length), int(version))
            return entries
        except IntegrityError:
            raise
        except (ValueError, UnicodeDecodeError) as e:
            raise IntegrityError(f"malformed integrity metadata {self.path}: {e}") from None

    def _read_disk(self):
        self._fs.counters.metadata_opens += 1
        self._fs.counters.host_syscalls_total += 1
        try:
            with open(self.path, "rb") as f:
                data = f.read()
        except FileNotFoundError:
            return None
        return self.parse(data)

    def ensure_loaded(self):
        if self.entries is None:
            entries = self._read_disk()
            self.entries = entries if entries is not None else {}

    def check_disk(self):
        """Require the on-disk map to equal the trusted in-memory map."""
        self.ensure_loaded()
        disk = self._read_disk()
        if disk is None:
            disk = {}
        if disk != self.entries:
            raise IntegrityError(f"integrity metadata diverged from trusted state: {self.path}")

    def record(self, rel, data):
        self.ensure_loaded()
        prev = self.entries.get(rel)
        version = prev.version + 1 if prev else 1
        self.entries[rel] = MetaEntry(hashlib.sha256(data).hexdigest(), len(data), version)
        self.dirty = True
        return version

    def verify(self, rel, data):
        self.ensure_loaded()
        entry = self.entries.get(rel)
        if entry is None:
            raise IntegrityError(f"no integrity record for {rel} in region {self.region.region_id}")
        if len(data) != entry.length or hashlib.sha256(data).hexdigest() != entry.sha256:
            raise IntegrityError(f"checksum mismatch for {rel} in region {self.region.region_id}")

    def drop(self, rel):
        self.ensure_loaded()
        if self.entries.pop(rel, None) is not None:
            self.dirty = True

    def move(self, src, dst):
        self.ensure_loaded()
        entry = self.entries.pop(src)
        self.entries[dst] = MetaEntry(entry.sha256, entry.length, entry.version + 1)
        self.dirty = True

    def save(self):
        if not self.dirty:
            return
        data = self.serialize()
        tmp = self.path + ".tmp"
        fs = self._fs
        fs.counters.metadata_opens += 1
        fs._count_write(self.region)
        fs.counters.host_syscalls_total += 2
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, self.path)
        self.dirty = False


class FileCipher:
    """Block-wise AEAD sealing of whole files under a per-region key.

    Per-file keys are derived from the region key and the file's
    region-relative path; per-block nonces from the file key, the file
    version and the block index.  The file version strictly increases on
    every write and is floored at the current microsecond clock so that a
    fresh session never reuses a version from an earlier one.
    """

    def __init__(self, region_key, clock_us=None):
        if len(region_key) != 32:
            raise ConfigError("encryption region key must be 256 bits")
        self._key = region_key
        self._clock_us = clock_us or (lambda: time.time_ns() // 1000)
        self._versions = {}
        self._aeads = {}

    def file_key(self, rel):
        return derive_key(self._key, "file-key:" + rel)

    def _aead(self, rel):
        aead = self._aeads.get(rel)
        if aead is None:
            if len(self._aeads) > 4096:
                self._aeads.clear()
            fkey = self.file_key(rel)
            aead = self._aeads[rel] = (AESGCM(fkey), fkey)
        return aead

    @staticmethod
    def nonce(file_key, version, index):
        msg = struct.pack(">QQ", version, index)
        return hmac.new(file_key, b"nonce" + msg, hashlib.sha256).digest()[:NONCE_SIZE]

    def next_version(self, rel, on_disk_version=0):
        version = max(self._versions.get(rel, 0) + 1, on_disk_version + 1, self._clock_us())
        self._versions[rel] = version
        return version

    def seal(self, rel, plaintext, version):
        aead, fkey = self._aead(rel)
        header = HEADER.pack(MAGIC, FORMAT_VERSION, version, len(plaintext))
        out = [header]
        nblocks = max(1, -(-len(plaintext) // BLOCK_SIZE))
        view = memoryview(plaintext)
        for i in range(nblocks):
            chunk = view[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE]
            n = self.nonce(fkey, version, i)
            out.append(n)
            out.append(aead.encrypt(n, bytes(chunk), header + struct.pack(">Q", i)))
        return b"".join(out)

    @staticmethod
    def peek_version(data):
        if len(data) >= HEADER.size and data[:4] == MAGIC:
            return HEADER.unpack_from(data)[2]
        return 0

    def open(self, rel, data):
        if len(data) < HEADER.size:
            raise IntegrityError(f"encrypted file too short: {rel}")
        magic, fmt, version, length = HEADER.unpack_from(data)
        if magic != MAGIC or fmt != FORMAT_VERSION:
            raise IntegrityError(f"bad encrypted file header: {rel}")
        nblocks = max(1, -(-length // BLOCK_SIZE))
        expected = HEADER.size + nblocks * (NONCE_SIZE + TAG_SIZE) + length
        if len(data) != expected:
            raise IntegrityError(f"encrypted file length mismatch: {rel}")
        aead, fkey = self._aead(rel)
        header = bytes(data[:HEADER.size])
        pos = HEADER.size
        out = []
        for i in range(nblocks):
            clen = min(BLOCK_SIZE, length - i * BLOCK_SIZE) + TAG_SIZE
            n = bytes(data[pos:pos + NONCE_SIZE])
            if n != self.nonce(fkey, version, i):
                raise IntegrityError(f"unexpected nonce in block {i} of {rel}")
            pos += NONCE_SIZE
            try:
                out.append(aead.decrypt(n, bytes(data[pos:pos + clen]), header + struct.pack(">Q", i)))
            except InvalidTag:
                raise IntegrityError(f"authentication tag failure in block {i} of {rel}") from None
            pos += clen
        if self._versions.get(rel, 0) < version:
            self._versions[rel] = version
        return b"".join(out)


class RegionFS:
    """Host file access routed through region provider stacks."""

    def __init__(self, table=None, region_keys=None, mac_key=None, counters=None,
                 data_regions=()):
        self.table = table if table is not None else RegionTable()
        self.region_keys = dict(region_keys or {})
        self.mac_key = mac_key
        self.counters = counters if counters is not None else Counters()
        self.data_regions = frozenset(data_regions)
        self._meta = {}
        self._ciphers = {}
        self._batch_depth = 0

    # -- provider plumbing -------------------------------------------------

    def _count_write(self, region):
        if region.region_id in self.data_regions:
            self.counters.data_write_ops += 1
        else:
            self.counters.host_write_ops += 1

    def _metadata(self, region):
        md = self._meta.get(region.meta_path)
        if md is None:
            if self.mac_key is None:
                raise ConfigError(f"region {region.region_id} needs an integrity key")
            md = self._meta[region.meta_path] = IntegrityMetadata(region, self.mac_key, self)
        return md

    def _cipher(self, region):
        c = self._ciphers.get(region.region_id)
        if c is None:
            key = self.region_keys.get(region.region_id)
            if key is None:
                raise ConfigError(f"no key provisioned for region {region.region_id}")
            c = self._ciphers[region.region_id] = FileCipher(key)
        return c

    def resolve(self, path):
        return self.table.resolve(path)

    @contextlib.contextmanager
    def batch(self):
        """Defer integrity-metadata rewrites until the outermost batch exits."""
        self._batch_depth += 1
        try:
            yield
        finally:
            self._batch_depth -= 1
        if self._batch_depth == 0:
            self.flush_metadata()

    def flush_metadata(self):
        for md in self._meta.values():
            md.save()

    def _after_update(self):
        if self._batch_depth == 0:
            self.flush_metadata()

    def _host_read(self, path):
        self.counters.host_syscalls_total += 1
        try:
            with open(path, "rb") as f:
                return f.read()
        except FileNotFoundError:
            raise NotFoundError(path) from None

    def _host_write(self, region, path, data, mode="wb"):
        self._count_write(region)
        self.counters.host_syscalls_total += 1
        try:
            f = open(path, mode)
        except FileNotFoundError:
            self.counters.host_syscalls_total += 1
            os.makedirs(os.path.dirname(path), exist_ok=True)
            f = open(path, mode)
        with f:
            f.write(data)

    # -- public operations -------------------------------------------------

    def protected_write(self, path, content):
        path = os.path.abspath(path)
        region = self.resolve(path)
        rel = region.relpath(path)
        data = content
        for kind in region.stack:
            if kind == ENCRYPTION:
                cipher = self._cipher(region)
                on_disk = 0
                if rel not in cipher._versions and os.path.exists(path):
                    with open(path, "rb") as f:
                        on_disk = FileCipher.peek_version(f.read(HEADER.size))
                data = cipher.seal(rel, data, cipher.next_version(rel, on_disk))
        self._host_write(region, path, data)
        if INTEGRITY in region.stack:
            self._metadata(region).record(rel, data)
            self._after_update()

    def protected_read(self, path):
        path = os.path.abspath(path)
        region = self.resolve(path)
        rel = region.relpath(path)
        data = self._host_read(path)
        for kind in reversed(region.stack):
            if kind == INTEGRITY:
                md = self._metadata(region)
                if self._batch_depth == 0:
                    md.check_disk()
                md.verify(rel, data)
            elif kind == ENCRYPTION:
                data = self._cipher(region).open(rel, data)
        return data

    def append(self, path, data):
        path = os.path.abspath(path)
        region = self.resolve(path)
        if region.stack == (PASSTHROUGH,):
            self._host_write(region, path, data, "ab")
            return
        old = self.protected_read(path) if self.exists(path) else b""
        self.protected_write(path, old + data)

    def exists(self, path):
        self.counters.host_syscalls_total += 1
        return os.path.exists(path)

    def makedirs(self, path):
        self.counters.host_syscalls_total += 1
        os.makedirs(path, exist_ok=True)

    def remove(self, path):
        path = os.path.abspath(path)
        region = self.resolve(path)
        self.counters.host_syscalls_total += 1
        try:
            os.remove(path)
        except FileNotFoundError:
            pass
        if INTEGRITY in region.stack:
            self._metadata(region).drop(region.relpath(path))
            self._after_update()

    def rename(self, src, dst):
        src, dst = os.path.abspath(src), os.path.abspath(dst)
        rs, rd = self.resolve(src), self.resolve(dst)
        if rs == rd and ENCRYPTION not in rs.stack:
            self.counters.host_syscalls_total += 1
            if not os.path.isdir(os.path.dirname(dst)):
                self.makedirs(os.path.dirname(dst))
            try:
                os.rename(src, dst)
            except FileNotFoundError:
                raise NotFoundError(src) from None
            if INTEGRITY in rs.stack:
                self._metadata(rs).move(rs.relpath(src), rs.relpath(dst))
                self._after_update()
            return
        with self.batch():
            data = self.protected_read(src)
            self.protected_write(dst, data)
            self.remove(src)
