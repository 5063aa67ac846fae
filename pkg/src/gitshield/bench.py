"""IOZone-style sequential throughput benchmark over the variant matrix."""

import csv
import json
import os
import random
import secrets
import shutil
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, field

from .errors import ConfigError
from .regions import VARIANTS, get_variant
from .trust import LocalTrust, ServiceClient, start_server
from .vfs import PushPolicy, Shield, ShieldConfig

PHASES = ("write", "rewrite", "read")
DEFAULT_FILE_SIZES = tuple(32 * 1024 << i for i in range(12))  # 32 KiB .. 64 MiB
DEFAULT_RECORD = 16 * 1024
CSV_COLUMNS = ("variant", "phase", "file_bytes", "record_bytes", "throughput_Bps",
               "commits", "loose_objects", "host_write_ops", "metadata_opens", "pushes")
_COUNTED = CSV_COLUMNS[5:]


@dataclass
class BenchPlan:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    file_sizes: list = field(default_factory=lambda: list(DEFAULT_FILE_SIZES))
    record_size: int = DEFAULT_RECORD
    phases: list = field(default_factory=lambda: list(PHASES))
    push: bool = False
    repetitions: int = 5
    warmup: bool = False
    workdir: str = None
    seed: int = 1

    def validate(self):
        if not self.variants or not self.file_sizes or not self.phases:
            raise ConfigError("plan needs at least one variant, file size and phase")
        for v in self.variants:
            get_variant(v)
        for p in self.phases:
            if p not in PHASES:
                raise ConfigError(f"unknown phase {p!r}")
        if self.record_size <= 0 or self.repetitions <= 0:
            raise ConfigError("record size and repetitions must be positive")
        if self.record_size > min(self.file_sizes):
            raise ConfigError("record size exceeds the smallest file size")
        bad = [s for s in self.file_sizes if s % self.record_size]
        if bad:
            raise ConfigError(f"file sizes {bad} are not multiples of the record size")


@dataclass
class CellResult:
    variant: str
    phase: str
    file_bytes: int
    record_bytes: int
    throughput_Bps: float
    commits: int
    loose_objects: int
    host_write_ops: int
    metadata_opens: int
    pushes: int
    samples: list = field(default_factory=list)

    def row(self):
        return [getattr(self, c) for c in CSV_COLUMNS]


def _record(seed, size):
    return random.Random(seed).randbytes(size)


class _Env:
    """Freshness endpoint for one run: in-process store or a TCP service."""

    def __init__(self, push, root):
        self.push = push
        self.server = None
        if push:
            key = secrets.token_bytes(32)
            self.server = start_server("127.0.0.1:0", key, os.path.join(root, "service"))
            self.trust = ServiceClient(self.server.addr, key)
        else:
            self.trust = LocalTrust()

    def close(self):
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()


def _new_shield(plan, env, variant, root, n):
    repo = os.path.join(root, f"repo{n}")
    policy = (PushPolicy(on_barrier=True, every_n_commits=1) if plan.push
              else PushPolicy(on_barrier=False))
    mirror = os.path.join(root, f"mirror{n}") if plan.push else None
    cfg = ShieldConfig(repo, variant=variant, init="fresh", push=policy,
                       mirror_dir=mirror, buffer_cap_bytes=max(plan.file_sizes) * 4)
    return Shield(cfg, env.trust).start()


def _sequential_write(shield, size, rec, flags):
    fd = shield.open("bench.dat", flags)
    for _ in range(size // len(rec)):
        shield.write(fd, rec)
    shield.close(fd)


def _sequential_read(shield, size, rec_size):
    fd = shield.open("bench.dat", os.O_RDONLY)
    got = 0
    while got < size:
        chunk = shield.read(fd, rec_size)
        if not chunk:
            break
        got += len(chunk)
    shield.close(fd)
    if got != size:
        raise RuntimeError(f"read {got} of {size} bytes")


def run_phase(shield, phase, size, plan):
    """Run one measured phase on ``shield``; returns (seconds, counter delta)."""
    rec = _record(plan.seed, plan.record_size)
    # The file is created before the timer so the write phase measures writes only.
    shield.close(shield.open("bench.dat", os.O_CREAT | os.O_EXCL | os.O_WRONLY))
    if phase in ("rewrite", "read"):
        _sequential_write(shield, size, rec, os.O_WRONLY)
        rec = _record(plan.seed + 1, plan.record_size)
    before = shield.counters.snapshot()
    t0 = time.perf_counter()
    if phase in ("write", "rewrite"):
        _sequential_write(shield, size, rec, os.O_WRONLY)
    else:
        _sequential_read(shield, size, plan.record_size)
    elapsed = time.perf_counter() - t0
    return elapsed, shield.counters.delta(before)


def run_cell(plan, variant, phase, size):
    root = tempfile.mkdtemp(prefix="gitshield-bench-", dir=plan.workdir)
    env = _Env(plan.push, root)
    samples, deltas = [], []
    try:
        reps = plan.repetitions + (1 if plan.warmup else 0)
        for n in range(reps):
            shield = _new_shield(plan, env, variant, root, n)
            elapsed, delta = run_phase(shield, phase, size, plan)
            if plan.warmup and n == 0:
                continue
            samples.append(size / max(elapsed, 1e-9))
            deltas.append(delta)
            shutil.rmtree(os.path.join(root, f"repo{n}"), ignore_errors=True)
    finally:
        env.close()
        shutil.rmtree(root, ignore_errors=True)
    first = deltas[0]
    return CellResult(variant, phase, size, plan.record_size, statistics.median(samples),
                      *(first[c] for c in _COUNTED), samples=samples)


def run_bench(plan, out=None, as_json=False):
    """Run every cell of ``plan`` in order, streaming CSV (or JSON lines) to ``out``."""
    plan.validate()
    results = []
    writer = None
    if out is not None and not as_json:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
    for variant in plan.variants:
        for size in plan.file_sizes:
            for phase in plan.phases:
                res = run_cell(plan, variant, phase, size)
                results.append(res)
                if writer is not None:
                    writer.writerow(res.row())
                elif out is not None:
                    out.write(json.dumps(dict(zip(CSV_COLUMNS, res.row()))) + "\n")
                if out is not None:
                    out.flush()
    return results


def parse_size(text):
    """``"16K"``, ``"4M"``, ``"65536"`` -> bytes (binary multiples)."""
    t = text.strip().upper().removesuffix("IB").removesuffix("B")
    mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(t[-1:], 1)
    if mult != 1:
        t = t[:-1]
    try:
        return int(t) * mult
    except ValueError:
        raise ConfigError(f"bad size {text!r}") from None


if __name__ == "__main__":
    run_bench(BenchPlan(file_sizes=[1 << 20], repetitions=1), sys.stdout)
