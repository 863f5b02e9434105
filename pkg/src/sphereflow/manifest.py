"""Run manifests: enough to rerun a command and verify the result."""
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
import json
from pathlib import Path

from . import __version__


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    params_sha1: str = ""
    tool_version: str = __version__
    started: str = field(default_factory=utc_now)
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def finish(self, params_sha1=None, **extra):
        if params_sha1 is not None:
            self.params_sha1 = params_sha1
        self.extra.update(extra)
        self.finished = utc_now()
        return self

    def write(self, path):
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))
