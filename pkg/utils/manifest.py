import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List

from .errors import InputError
from .grid_io import file_checksum, write_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Everything needed to re-execute a guide run and verify its artifacts"""

    layout_id: str
    seed: int
    config: Dict[str, Any]
    layout: Dict[str, Any]
    mode: str
    dump_maps: bool = False
    outputs: List[str] = field(default_factory=list)
    checksums: Dict[str, str] = field(default_factory=dict)

    def record_outputs(self, run_dir: Path, paths: Iterable[Path]) -> None:
        """Checksum the artifacts this run wrote; other files under run_dir are ignored"""
        run_dir = Path(run_dir)
        self.outputs = sorted({Path(p).relative_to(run_dir).as_posix() for p in paths} - {MANIFEST_NAME})
        self.checksums = {name: file_checksum(run_dir / name) for name in self.outputs}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        missing = {"layout_id", "seed", "config", "layout", "mode"} - set(data)
        if missing:
            raise InputError(f"manifest lacks {sorted(missing)}")
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def write(self, run_dir: Path) -> Path:
        return write_json(Path(run_dir) / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return cls.from_dict(json.load(handle))
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: manifest is not valid JSON ({e})") from e


def compare_checksums(expected: Dict[str, str], actual: Dict[str, str]) -> List[str]:
    """Artifact names whose checksums differ or that exist on one side only"""
    return sorted(name for name in set(expected) | set(actual) if expected.get(name) != actual.get(name))
