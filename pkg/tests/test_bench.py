import pytest

from conftest import SCRATCH
from gitshield.bench import BenchPlan, parse_size, run_bench
from gitshield.errors import ConfigError

K = 1024


def plan(**kw):
    kw.setdefault("repetitions", 1)
    kw.setdefault("workdir", SCRATCH)
    return BenchPlan(**kw)


def cell(**kw):
    return run_bench(plan(**kw))[0]


def test_fine_commit_count():
    r = cell(variants=["Inte-fine-disk"], file_sizes=[2 * 1024 * K], phases=["write"])
    assert r.commits == 128
    assert r.loose_objects == 3 * r.commits
    assert r.host_write_ops <= 8 * r.commits


def test_coarse_commit_count():
    r = cell(variants=["Encr-coarse-disk"], file_sizes=[2 * 1024 * K], phases=["write"])
    assert r.commits == 1 and r.loose_objects == 3


@pytest.mark.parametrize("phase", ["rewrite", "read"])
def test_other_phases(phase):
    r = cell(variants=["Inte-fine-disk"], file_sizes=[64 * K], phases=[phase])
    assert r.commits == (4 if phase == "rewrite" else 0)
    assert r.throughput_Bps > 0


def test_counters_deterministic():
    rs = run_bench(plan(variants=["Inte-coarse-disk", "Nopr-fine-disk"], file_sizes=[64 * K],
                        phases=["write"], repetitions=3))
    for r in rs:
        assert len(r.samples) == 3
    again = run_bench(plan(variants=["Inte-coarse-disk", "Nopr-fine-disk"], file_sizes=[64 * K],
                           phases=["write"], repetitions=3))
    for a, b in zip(rs, again):
        assert (a.commits, a.loose_objects, a.pushes) == (b.commits, b.loose_objects, b.pushes)


def test_push_on_counts_pushes():
    r = cell(variants=["Inte-coarse-disk"], file_sizes=[64 * K], phases=["write"], push=True)
    assert r.pushes == 1
    r = cell(variants=["Inte-coarse-disk"], file_sizes=[64 * K], phases=["write"])
    assert r.pushes == 0


@pytest.mark.parametrize("kw", [dict(record_size=64 * K, file_sizes=[32 * K]),
                                dict(file_sizes=[40 * K]), dict(phases=["mmap"]),
                                dict(variants=["Nope"]), dict(repetitions=0)])
def test_invalid_plans(kw):
    with pytest.raises(ConfigError):
        plan(**kw).validate()


def test_parse_size():
    assert parse_size("16K") == 16 * K
    assert parse_size("4MiB") == 4 * K * K
    assert parse_size("65536") == 65536
    with pytest.raises(ConfigError):
        parse_size("lots")
