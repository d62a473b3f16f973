from pathlib import Path
from typing import Union

import structlog

from defined.data.models import RunManifest

logger = structlog.get_logger()

MANIFEST_SUFFIX = ".manifest.json"


class ManifestRepository:
    """Run manifests stored as JSON next to the run's primary output"""

    def __init__(self, base_dir: Union[str, Path] = "."):
        self.base_dir = Path(base_dir)

    def manifest_path(self, output_path: Union[str, Path]) -> Path:
        output_path = Path(output_path)
        if not output_path.is_absolute():
            output_path = self.base_dir / output_path
        return output_path.with_name(output_path.name + MANIFEST_SUFFIX)

    def write(self, manifest: RunManifest, output_path: Union[str, Path]) -> Path:
        target = self.manifest_path(output_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        logger.info("manifest_written", path=str(target), subcommand=manifest.subcommand)
        return target

    def read(self, path: Union[str, Path]) -> RunManifest:
        path = Path(path)
        if not path.is_absolute():
            path = self.base_dir / path
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
