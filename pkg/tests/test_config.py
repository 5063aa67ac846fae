import pytest

from gitshield.config import config_from_mapping, load_config, parse_config_text
from gitshield.errors import ConfigError

SAMPLE = """
# shield configuration
repo.dir = /tmp/r
variant = Encr-coarse-disk
init = clone
expected_root = %s
service.addr = 127.0.0.1:7000
service.key_hex = 00ff
push.on_barrier = false
push.every_n_commits = 4
buffer.cap_bytes = 1048576
region.1.prefix = /tmp/data
region.1.stack = encryption+integrity
""" % ("a" * 40)


def test_parse_full():
    cfg = config_from_mapping(parse_config_text(SAMPLE))
    assert cfg.variant == "Encr-coarse-disk" and cfg.mode == "coarse"
    assert cfg.init == "clone" and cfg.expected_root == "a" * 40
    assert cfg.service_key == b"\x00\xff"
    assert cfg.push.on_barrier is False and cfg.push.every_n_commits == 4
    assert cfg.buffer_cap_bytes == 1 << 20
    assert cfg.regions[0].prefix == "/tmp/data"
    assert cfg.regions[0].stack == ("encryption", "integrity")


def test_clone_with_root_inline():
    cfg = config_from_mapping({"repo.dir": "/r", "init": "clone(%s)" % ("b" * 40)})
    assert cfg.init == "clone" and cfg.expected_root == "b" * 40


def test_defaults():
    cfg = config_from_mapping({}, repo_dir="/r")
    assert cfg.variant == "Inte-fine-disk" and cfg.init == "auto"
    assert cfg.push.every_n_commits is None and cfg.push.on_barrier


@pytest.mark.parametrize("text", ["bogus.key = 1", "no equals sign", "mode = fine\nmode = fine",
                                  "repo.dir = /r\npush.on_barrier = maybe",
                                  "repo.dir = /r\nexpected_root = xyz",
                                  "repo.dir = /r\nmode = sideways",
                                  "repo.dir = /r\nregion.1.stack = integrity",
                                  "repo.dir = /r\nservice.key_hex = zz",
                                  "variant = Inte-fine-disk"])
def test_rejects(text):
    with pytest.raises(ConfigError):
        config_from_mapping(parse_config_text(text))


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")
