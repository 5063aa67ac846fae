"""``gitshield`` command line: bench, verify, audit, adopt, tamper, serve."""

import argparse
import json
import logging
import os
import random
import sys

from . import bench
from .config import load_config
from .errors import ConfigError, IntegrityError, ServiceError, ShieldAborted, ShieldError
from .objects import Repository, hash_object
from .regions import (ENCRYPTION, HEADER, INTEGRITY, MAGIC, PASSTHROUGH, RegionFS,
                      RegionTable, Variant, configure_git_metadata_regions)
from .trust import ServiceClient, serve
from .vfs import REPO_ID_FILE, Shield, parse_audit_message

EXIT_OK, EXIT_INTEGRITY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
TAMPER_CLASSES = ("workfile", "object", "ref", "metadata", "block")
KEY_ENV = "GITSHIELD_KEY_HEX"


class UsageError(Exception):
    pass


def _key(args):
    text = args.key_hex or os.environ.get(KEY_ENV)
    if not text:
        return None
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise UsageError("service key is not valid hex") from None


def _client(args, required=False):
    addr = args.service
    key = _key(args)
    if args.config and (not addr or not key):
        cfg = load_config(args.config, repo_dir=getattr(args, "repo", None) or ".")
        addr = addr or cfg.service_addr
        key = key or cfg.service_key
    if addr and not key:
        raise UsageError(f"a service key is required ({KEY_ENV} or --key-hex)")
    if not addr:
        if required:
            raise UsageError("a freshness service is required (--service)")
        return None
    return ServiceClient(addr, key)


def _emit(args, text, record=None):
    if args.json:
        if record is not None:
            print(json.dumps(record))
    else:
        print(text)


# -- offline repository access ------------------------------------------------

def detect_layout(repo_dir):
    """Infer the provider stacks of an existing repository from its files."""
    git = os.path.join(repo_dir, ".git")
    if not os.path.isfile(os.path.join(git, "HEAD")):
        raise UsageError(f"{repo_dir} is not a repository")
    with open(os.path.join(git, "config"), "rb") as f:
        encrypted = f.read(len(MAGIC)) == MAGIC
    protected = os.path.exists(os.path.join(git, "tical-meta-a"))
    a = (INTEGRITY,) if protected else (PASSTHROUGH,)
    b = (ENCRYPTION,) if encrypted else (PASSTHROUGH,)
    return Variant("detected", "fine", a, b, b)


def read_repo_id(repo_dir):
    try:
        with open(os.path.join(repo_dir, ".git", REPO_ID_FILE), "rb") as f:
            return f.read().decode(errors="replace").strip()
    except FileNotFoundError:
        return None


def open_offline(repo_dir, client):
    """Repository handle for inspection; keys come from ``client`` when given."""
    repo_dir = os.path.abspath(repo_dir)
    layout = detect_layout(repo_dir)
    protected = layout.region_a != (PASSTHROUGH,) or layout.region_b != (PASSTHROUGH,)
    checked = False
    if client is not None and protected:
        repo_id = read_repo_id(repo_dir)
        if repo_id is None:
            raise IntegrityError("repository id file is missing")
        bundle = client.provision(repo_id)
        table = RegionTable(configure_git_metadata_regions(repo_dir, layout))
        fs = RegionFS(table, bundle.region_keys, bundle.mac_key, data_regions={"work"})
        checked = True
    elif ENCRYPTION in layout.region_b:
        raise UsageError("repository is encrypted; a freshness service is needed for keys")
    else:
        fs = RegionFS()
    return Repository(os.path.join(repo_dir, ".git"), fs), checked


def work_tree_violations(repo, head):
    """Files of ``head`` whose host copy is missing or differs from the blob."""
    work = os.path.dirname(repo.git_dir)
    out = []
    for rel, (oid, _mode) in sorted(repo.flatten_tree(repo.read_commit(head).tree).items()):
        try:
            data = repo.fs.protected_read(os.path.join(work, rel))
        except FileNotFoundError:
            out.append(f"work file {rel} is missing")
            continue
        except IntegrityError as e:
            out.append(f"work file {rel}: {e}")
            continue
        if hash_object("blob", data) != oid:
            out.append(f"work file {rel} does not match {oid}")
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_bench(args):
    plan = bench.BenchPlan(
        variants=args.variants.split(",") if args.variants else list(bench.VARIANTS),
        file_sizes=([bench.parse_size(s) for s in args.sizes.split(",")]
                    if args.sizes else list(bench.DEFAULT_FILE_SIZES)),
        record_size=bench.parse_size(args.record),
        phases=args.phases.split(","),
        push=args.push == "on",
        repetitions=args.reps,
        warmup=args.warmup,
        workdir=args.workdir,
    )
    bench.run_bench(plan, sys.stdout, as_json=args.json)
    return EXIT_OK


def cmd_verify(args):
    client = _client(args)
    repo, checked = open_offline(args.repo, client)
    violations = []
    head = None
    try:
        repo.read_head_symref()
        repo.check_config()
        head = repo.read_ref()
        if head is None:
            violations.append("no HEAD commit")
    except IntegrityError as e:
        violations.append(str(e))
    report = None
    if head:
        report = repo.fsck_walk(head)
        violations.extend(report.violations)
        try:
            repo.verify_reflogs(head)
            if report.ok:
                violations.extend(work_tree_violations(repo, head))
        except IntegrityError as e:
            violations.append(str(e))
    fresh = None
    if client is not None:
        latest = client.fetch_latest(read_repo_id(os.path.abspath(args.repo)) or "")
        if latest is None:
            violations.append("rollback suspected: service has no record for this repository")
        elif latest[1] != head:
            violations.append(f"rollback suspected: HEAD {head} but service holds "
                              f"seq {latest[0]} root {latest[1]}")
        else:
            fresh = latest[0]
    ok = not violations
    if args.json:
        print(json.dumps({"ok": ok, "head": head, "violations": violations,
                          "objects": report.reachable if report else 0,
                          "commits": report.commits if report else 0,
                          "metadata_checked": checked, "fresh_seq": fresh}))
    else:
        for v in violations:
            print(f"violation: {v}")
        if ok:
            extra = f", fresh at seq {fresh}" if fresh is not None else ""
            print(f"ok: {head} ({report.commits} commits, {report.reachable} objects{extra})")
        if not checked:
            print("note: integrity metadata not checked (no service keys)", file=sys.stderr)
    return EXIT_OK if ok else EXIT_INTEGRITY


def cmd_audit(args):
    repo, _ = open_offline(args.repo, _client(args))
    repo.read_head_symref()
    head = repo.read_ref()
    n = 0
    for oid, rec in repo.history(head) if head else ():
        if args.limit is not None and n >= args.limit:
            break
        n += 1
        try:
            fields = parse_audit_message(rec.message)
        except ValueError:
            fields = None
        record = {"commit": oid, "timestamp": rec.committer.timestamp, "audit": fields}
        if fields is None:
            text = f"{oid} {rec.committer.timestamp} (not an audit message)"
        else:
            text = (f"{oid} {rec.committer.timestamp} shield-id={fields['shield-id']} "
                    f"pid={fields['pid']} syscall={fields['syscall']} "
                    f"trigger={fields['trigger']} paths={','.join(fields['paths'])} "
                    f"bytes={fields['bytes']}")
        _emit(args, text, record)
    return EXIT_OK


def cmd_adopt(args):
    if not args.config:
        raise UsageError("adopt needs --config describing the shield")
    cfg = load_config(args.config, repo_dir=args.repo, init="clone")
    client = _client(args, required=True)
    shield = Shield(cfg, client).start()
    shield.adopt(args.paths)
    shield.shutdown()
    _emit(args, f"adopted {len(args.paths)} file(s) at {shield.root_hash}",
          {"adopted": args.paths, "root": shield.root_hash})
    return EXIT_OK


def tamper_candidates(repo_dir, target):
    repo_dir = os.path.abspath(repo_dir)
    git = os.path.join(repo_dir, ".git")
    out = []
    for dirpath, dirnames, filenames in os.walk(repo_dir):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, git)
            in_git = not rel.startswith("..")
            if target == "workfile":
                ok = not in_git
            elif target == "object":
                ok = in_git and rel.startswith("objects" + os.sep)
            elif target == "ref":
                ok = in_git and (rel.split(os.sep)[0] in ("refs", "logs", "HEAD", "tical-stage",
                                                          REPO_ID_FILE))
            elif target == "metadata":
                ok = in_git and name.startswith("tical-meta-") and not name.endswith(".tmp")
            else:
                ok = _is_sealed(path)
            if ok and os.path.getsize(path) > 0:
                out.append(path)
    return out


def _is_sealed(path):
    with open(path, "rb") as f:
        return f.read(len(MAGIC)) == MAGIC


def tamper(repo_dir, target, seed, offset=None, path=None):
    """Flip (XOR 0xFF) one byte of a file in ``target``'s class, bypassing every provider."""
    if target not in TAMPER_CLASSES:
        raise UsageError(f"tamper class must be one of {TAMPER_CLASSES}")
    rng = random.Random(seed)
    if path is None:
        files = tamper_candidates(repo_dir, target)
        if not files:
            raise UsageError(f"no files of class {target} in {repo_dir}")
        path = files[rng.randrange(len(files))]
    size = os.path.getsize(path)
    if offset is None:
        # Sealed files: aim past the header so the hit lands in a block.
        lo = HEADER.size if target == "block" and size > HEADER.size else 0
        offset = rng.randrange(lo, size)
    if not 0 <= offset < size:
        raise UsageError(f"offset {offset} outside {path} ({size} bytes)")
    with open(path, "r+b") as f:
        f.seek(offset)
        old = f.read(1)[0]
        f.seek(offset)
        f.write(bytes([old ^ 0xFF]))
    return {"class": target, "path": path, "offset": offset, "old": old, "new": old ^ 0xFF}


def cmd_tamper(args):
    info = tamper(args.repo, args.target, args.seed, args.offset, args.file)
    _emit(args, f"flipped byte {info['offset']} of {info['path']}: "
                f"0x{info['old']:02x} -> 0x{info['new']:02x}", info)
    return EXIT_OK


def cmd_serve(args):
    key = _key(args)
    if key is None:
        raise UsageError(f"serve needs a pre-shared key ({KEY_ENV} or --key-hex)")
    os.makedirs(args.state_dir, exist_ok=True)

    def ready(addr):
        print(f"listening on {addr}", flush=True)

    serve(args.listen, args.state_dir, key, ready=ready)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gitshield", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key-value configuration file")
    p.add_argument("--service", help="freshness service address host:port")
    p.add_argument("--key-hex", help=f"service pre-shared key (default ${KEY_ENV})")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    b = sub.add_parser("bench", help="sequential throughput over the variant matrix")
    b.add_argument("--variants", help="comma-separated variant names (default: all)")
    b.add_argument("--sizes", help="comma-separated file sizes, e.g. 32K,4M")
    b.add_argument("--record", default="16K")
    b.add_argument("--phases", default="write,rewrite,read")
    b.add_argument("--push", choices=("on", "off"), default="off")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", action="store_true", help="discard one extra first run")
    b.add_argument("--workdir", help="directory for scratch repositories")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="check objects, refs and freshness")
    v.add_argument("repo")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("audit", help="list the commit history newest first")
    a.add_argument("repo")
    a.add_argument("--limit", type=int)
    a.set_defaults(func=cmd_audit)

    d = sub.add_parser("adopt", help="import untracked host files")
    d.add_argument("repo")
    d.add_argument("paths", nargs="+")
    d.set_defaults(func=cmd_adopt)

    t = sub.add_parser("tamper", help="flip one byte of a repository file (testing)")
    t.add_argument("target", choices=TAMPER_CLASSES)
    t.add_argument("repo")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--offset", type=int)
    t.add_argument("--file", help="tamper this file instead of a seeded pick")
    t.set_defaults(func=cmd_tamper)

    s = sub.add_parser("serve", help="run the freshness service")
    s.add_argument("--listen", default="127.0.0.1:7878")
    s.add_argument("--state-dir", required=True)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"gitshield: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ShieldAborted as e:
        print(f"gitshield: {e}", file=sys.stderr)
        cause = e.cause
        return EXIT_INTEGRITY if isinstance(cause, IntegrityError) else EXIT_IO
    except IntegrityError as e:
        print(f"gitshield: integrity violation: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ServiceError as e:
        print(f"gitshield: {e}", file=sys.stderr)
        return EXIT_IO
    except ShieldError as e:
        print(f"gitshield: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"gitshield: {e}", file=sys.stderr)
        return EXIT_IO
