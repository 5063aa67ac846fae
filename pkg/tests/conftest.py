import os
import shutil
import subprocess
import tempfile

import pytest

from gitshield.trust import FreshnessStore, LocalTrust
from gitshield.vfs import PushPolicy, Shield, ShieldConfig

# tmpfs keeps the many small fsyncs cheap when it is available.
SCRATCH = "/dev/shm" if os.path.isdir("/dev/shm") and os.access("/dev/shm", os.W_OK) else None

GIT_ENV = {
    "GIT_CONFIG_NOSYSTEM": "1",
    "GIT_CONFIG_GLOBAL": os.devnull,
    "GIT_AUTHOR_NAME": "Oracle",
    "GIT_AUTHOR_EMAIL": "oracle@example.com",
    "GIT_AUTHOR_DATE": "1700000000 +0000",
    "GIT_COMMITTER_NAME": "Oracle",
    "GIT_COMMITTER_EMAIL": "oracle@example.com",
    "GIT_COMMITTER_DATE": "1700000000 +0000",
}


def git(*args, cwd=None, input=None, check=True, env=None):
    full_env = dict(os.environ, **GIT_ENV, **(env or {}))
    res = subprocess.run(["git", *args], cwd=cwd, input=input, capture_output=True,
                         env=full_env, check=False)
    if check and res.returncode != 0:
        raise AssertionError(f"git {' '.join(args)} failed: {res.stderr.decode()}")
    return res


@pytest.fixture
def scratch():
    d = tempfile.mkdtemp(prefix="gitshield-test-", dir=SCRATCH)
    yield d
    shutil.rmtree(d, ignore_errors=True)


@pytest.fixture
def trust():
    return LocalTrust(FreshnessStore(b"k" * 32))


def make_shield(root, trust, variant="Inte-fine-disk", **kw):
    kw.setdefault("push", PushPolicy(on_barrier=True))
    return Shield(ShieldConfig(os.path.join(root, "repo"), variant=variant, **kw), trust).start()


def reopen(shield, trust, **kw):
    cfg = shield.config
    return Shield(ShieldConfig(cfg.repo_dir, variant=cfg.variant, repo_id=shield.repo_id,
                               init="clone", **kw), trust).start()


@pytest.fixture
def shield_factory(scratch, trust):
    def factory(variant="Inte-fine-disk", **kw):
        return make_shield(scratch, trust, variant, **kw)
    return factory


class ServiceProcess:
    """The freshness service running as a separate OS process."""

    def __init__(self, state_dir, key):
        self.state_dir = state_dir
        self.key = key
        self.proc = None
        self.addr = None

    def start(self, listen="127.0.0.1:0"):
        import sys
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "gitshield", "--key-hex", self.key.hex(), "serve",
             "--listen", listen, "--state-dir", self.state_dir],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        line = self.proc.stdout.readline()
        if not line.startswith("listening on "):
            self.proc.kill()
            raise RuntimeError(f"service failed to start: {line}{self.proc.stderr.read()}")
        self.addr = line.split()[-1]
        return self

    def kill9(self):
        self.proc.kill()
        self.proc.wait()

    def stop(self):
        if self.proc and self.proc.poll() is None:
            self.proc.terminate()
            self.proc.wait(5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
