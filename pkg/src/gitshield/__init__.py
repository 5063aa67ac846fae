"""Git-backed, integrity-protected file storage with rollback detection."""

from .counters import Counters
from .errors import (ConfigError, IntegrityError, RollbackError, ServiceError,
                     ShieldAborted, ShieldError)
from .objects import Repository, open_existing
from .trust import FreshnessStore, LocalTrust, ServiceClient, start_server
from .vfs import PushPolicy, Shield, ShieldConfig, shield_init

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Counters", "FreshnessStore", "IntegrityError", "LocalTrust",
    "PushPolicy", "Repository", "RollbackError", "ServiceClient", "ServiceError",
    "Shield", "ShieldAborted", "ShieldConfig", "ShieldError", "open_existing",
    "shield_init", "start_server",
]
