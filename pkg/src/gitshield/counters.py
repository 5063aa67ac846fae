from dataclasses import asdict, dataclass


@dataclass
class Counters:
    """Operation counters shared by the store, the providers and the facade.

    ``host_write_ops`` counts host file writes issued for the repository
    (objects, refs, reflogs, stage file, integrity metadata).  Working-tree
    write-back is counted separately in ``data_write_ops`` so that the
    per-commit amplification can be read off directly.
    """

    writes: int = 0
    reads: int = 0
    commits: int = 0
    pushes: int = 0
    loose_objects: int = 0
    host_write_ops: int = 0
    data_write_ops: int = 0
    metadata_opens: int = 0
    host_syscalls_total: int = 0

    def snapshot(self):
        return asdict(self)

    def delta(self, before):
        now = self.snapshot()
        return {k: now[k] - before[k] for k in now}
