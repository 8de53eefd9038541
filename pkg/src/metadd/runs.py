"""Run directories: exact config, atomically-written manifest, and an owner lockfile."""
import datetime
import json
import os
import socket
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import __version__
from .container import atomic_write_text
from .errors import ContractError, LockError

PENDING, RUNNING, COMPLETE, FAILED = "pending", "running", "complete", "failed"


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclass
class RunManifest:
    config_hash: str
    stage: str
    component_versions: dict = field(default_factory=lambda: {
        "metadd": __version__, "torch": torch.__version__, "numpy": np.__version__})
    started_at: str = ""
    ended_at: str = ""
    artifacts: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def set_status(self, stage, status):
        if self.stages.get(stage) == COMPLETE and status != COMPLETE:
            raise ContractError(f"stage {stage!r} is complete and cannot be re-marked {status!r}")
        self.stages[stage] = status

    def add_artifact(self, path):
        if path not in self.artifacts:
            self.artifacts.append(path)

    def is_complete(self, stage=None):
        return self.stages.get(stage or self.stage) == COMPLETE

    def save(self, run_dir):
        atomic_write_text(os.path.join(run_dir, "manifest.json"), json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, run_dir):
        with open(os.path.join(run_dir, "manifest.json")) as f:
            return cls(**json.load(f))


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunLock:
    """Exclusive lock on a run directory; a stale lock from a dead local process is taken over."""

    def __init__(self, run_dir):
        self.path = os.path.join(run_dir, ".lock")
        self.fd = None

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        owner = {"pid": os.getpid(), "host": socket.gethostname(), "since": _now()}
        for _ in range(2):
            try:
                self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(self.fd, json.dumps(owner).encode())
                return self
            except FileExistsError:
                try:
                    with open(self.path) as f:
                        held = json.load(f)
                except (OSError, ValueError):
                    held = {}
                if held.get("host") == owner["host"] and not _pid_alive(int(held.get("pid", -1))):
                    os.unlink(self.path)
                    continue
                raise LockError(f"run directory is locked by {held or 'an unknown owner'}") from None
        raise LockError(f"could not acquire {self.path}")

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
            self.fd = None
