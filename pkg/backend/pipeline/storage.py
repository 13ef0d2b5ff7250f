"""
Run directory layout and stage manifests

Every pipeline stage records the SHA-256 of each artifact it wrote together
with a digest of the settings it ran with. A stage is skipped on rerun only
when both still match. Manifests carry no timestamps so that identical runs
produce identical files.
"""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, Optional

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STAGE_DIR = "stages"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def settings_digest(settings: Dict) -> str:
    """SHA-256 of the canonical JSON form of a settings mapping"""
    return hashlib.sha256(canonical_json(settings, indent=None).encode("utf-8")).hexdigest()


def _clean(value):
    """Replace non-finite floats by None so the output is strict JSON"""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "tolist"):
        return _clean(value.tolist())
    return value


def canonical_json(data, indent: Optional[int] = 2) -> str:
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(_clean(data), indent=indent, sort_keys=True, separators=separators, allow_nan=False)


def write_json(path: Path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(data) + "\n")


class RunDirectory:
    """Paths of one experiment run and the stage records kept inside it"""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def vae_dir(self) -> Path:
        return self.root / "vae"

    def case_dir(self, case_index: int) -> Path:
        return self.root / "cases" / f"case_{case_index:02d}"

    def method_dir(self, case_index: int, method: str) -> Path:
        return self.case_dir(case_index) / method

    def pilot_dir(self, case_index: int) -> Path:
        return self.case_dir(case_index) / "pilot"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    def _stage_path(self, stage: str) -> Path:
        return self.root / STAGE_DIR / f"{stage}.json"

    def relative(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def record_stage(self, stage: str, settings: Dict, artifacts: Iterable[Path], summary: Optional[Dict] = None):
        """Hash the artifacts of a finished stage and store its record"""
        hashes = {self.relative(p): sha256_file(p) for p in sorted(Path(a) for a in artifacts)}
        record = {
            "stage": stage,
            "settings_digest": settings_digest(settings),
            "artifacts": hashes,
            "summary": summary or {},
        }
        write_json(self._stage_path(stage), record)
        logger.debug(f"[Pipeline] Recorded stage '{stage}' with {len(hashes)} artifacts")

    def load_stage(self, stage: str) -> Optional[Dict]:
        path = self._stage_path(stage)
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def stage_complete(self, stage: str, settings: Optional[Dict] = None) -> bool:
        """
        True when the stage has a record whose artifacts all exist and hash-match.

        Args:
            stage: Stage name
            settings: When given, the recorded settings digest must match as well
        """
        record = self.load_stage(stage)
        if record is None:
            return False
        if settings is not None and record["settings_digest"] != settings_digest(settings):
            logger.info(f"[Pipeline] Settings changed for stage '{stage}'; rerunning")
            return False
        for rel, expected in record["artifacts"].items():
            path = self.root / rel
            if not path.exists() or sha256_file(path) != expected:
                logger.warning(f"[Pipeline] Artifact {rel} of stage '{stage}' is missing or modified; rerunning")
                return False
        return True

    def write_manifest(self, config_digest: str):
        """Merge every stage record into the top-level manifest"""
        stages = {}
        stage_root = self.root / STAGE_DIR
        if stage_root.exists():
            for path in sorted(stage_root.glob("*.json")):
                stages[path.stem] = json.loads(path.read_text())
        write_json(self.root / MANIFEST_NAME, {"config_digest": config_digest, "stages": stages})
