"""
Run directories: manifest, timestamped manifest backups, CSV tables and loss logs.
"""

import csv
import json
import logging
import platform
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from config.settings import RunConfig, config_digest
from errors import CorpusError

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ("numpy", "scipy", "torch", "trimesh", "pydantic", "langgraph")


def package_versions(names: Sequence[str] = TRACKED_PACKAGES) -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in names:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


class RunDirectory:
    """Single-writer directory holding everything one CLI command produces."""

    def __init__(self, root: Union[str, Path], manifest_name: str = "manifest.json"):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            self.backup_dir = self.root / "backups"
            self.backup_dir.mkdir(exist_ok=True)
        except OSError as e:
            raise CorpusError(f"cannot create run directory {self.root}: {e}") from e
        self.manifest_file = self.root / manifest_name

    def path(self, name: str) -> Path:
        return self.root / name

    def write_manifest(self, command: str, config: RunConfig, extra: Optional[Dict[str, Any]] = None) -> Path:
        """Record what is needed to rerun the command; older manifests are kept as backups."""
        manifest = {
            "command": command,
            "seed": config.seed,
            "profile": config.profile,
            "config_sha256": config_digest(config),
            "config": config.model_dump(mode="json"),
            "versions": package_versions(),
            **(extra or {}),
        }
        try:
            if self.manifest_file.exists():
                stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
                backup = self.backup_dir / f"manifest_backup_{stamp}.json"
                backup.write_text(self.manifest_file.read_text())
                logger.info(f"✓ backup created: {backup}")
            self.manifest_file.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        except OSError as e:
            raise CorpusError(f"cannot write manifest in {self.root}: {e}") from e
        logger.info(f"✓ manifest written to {self.manifest_file}")
        return self.manifest_file

    def load_manifest(self) -> Dict[str, Any]:
        if not self.manifest_file.exists():
            raise CorpusError(f"no manifest in {self.root}")
        return json.loads(self.manifest_file.read_text())

    def write_csv(self, name: str, rows: Iterable[Dict[str, Any]]) -> Path:
        """One table; columns follow the first row, values are written with repr precision."""
        rows = list(rows)
        path = self.path(name)
        columns: List[str] = list(rows[0]) if rows else []
        for row in rows[1:]:
            columns.extend(k for k in row if k not in columns)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns, restval="")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
        logger.info(f"✓ wrote {len(rows)} rows to {path}")
        return path

    def read_csv(self, name: str) -> List[Dict[str, str]]:
        with open(self.path(name), newline="") as f:
            return list(csv.DictReader(f))

    def loss_log(self, name: str = "losses.csv") -> "LossLog":
        return LossLog(self.path(name))


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


class LossLog:
    """Per-step training losses, appended as they arrive; columns are fixed by the first row."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.columns: Optional[List[str]] = None
        self.rows = 0

    def __call__(self, step: int, row: Dict[str, Any]) -> None:
        self.append(row)

    def append(self, row: Dict[str, Any]) -> None:
        if self.columns is None:
            self.columns = list(row)
            with open(self.path, "w", newline="") as f:
                csv.DictWriter(f, fieldnames=self.columns).writeheader()
        with open(self.path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.columns, restval="", extrasaction="ignore")
            writer.writerow({k: _cell(v) for k, v in row.items()})
        self.rows += 1
