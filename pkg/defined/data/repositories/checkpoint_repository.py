import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import structlog
import torch

from defined.config.run_configs import ModelConfig
from defined.data.models import TrainPhase
from defined.engines.transformer import DecisionFeedbackTransformer
from defined.errors import CheckpointError

logger = structlog.get_logger()


@dataclass
class LoadedCheckpoint:
    model: DecisionFeedbackTransformer
    phase: TrainPhase
    meta: Dict[str, Any] = field(default_factory=dict)


class CheckpointRepository:
    """
    Versioned binary container for detector weights

    Layout: magic, uint32 format version, uint32 header length, UTF-8 JSON
    header (model config, phase, tensor names, shapes and byte offsets),
    then every tensor in declaration order as little-endian float32.
    """

    MAGIC = b"DFND"
    FORMAT_VERSION = 1
    _PREFIX = struct.Struct("<4sII")

    def __init__(self, base_dir: Union[str, Path] = "."):
        self.base_dir = Path(base_dir)

    def resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def save(
        self,
        model: DecisionFeedbackTransformer,
        phase: TrainPhase,
        path: Union[str, Path],
        meta: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """Write model weights and config, returns the resolved path"""

        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)

        tensors = []
        blobs = []
        offset = 0
        for name, parameter in model.state_dict().items():
            data = parameter.detach().cpu().numpy().astype("<f4").tobytes()
            tensors.append(
                {"name": name, "shape": list(parameter.shape), "offset": offset, "nbytes": len(data)}
            )
            blobs.append(data)
            offset += len(data)

        header = json.dumps(
            {
                "config": model.config.model_dump(mode="json"),
                "phase": TrainPhase(phase).value,
                "meta": meta or {},
                "tensors": tensors,
            }
        ).encode("utf-8")

        with open(target, "wb") as handle:
            handle.write(self._PREFIX.pack(self.MAGIC, self.FORMAT_VERSION, len(header)))
            handle.write(header)
            for blob in blobs:
                handle.write(blob)

        logger.info(
            "checkpoint_saved",
            path=str(target),
            phase=TrainPhase(phase).value,
            parameters=model.parameter_count,
        )
        return target

    def read_header(self, path: Union[str, Path]) -> Dict[str, Any]:
        header, _ = self._read(path)
        return header

    def load(self, path: Union[str, Path]) -> LoadedCheckpoint:
        """Rebuild the detector stored at path"""

        header, payload = self._read(path)
        try:
            config = ModelConfig(**header["config"])
            phase = TrainPhase(header["phase"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"checkpoint header is invalid: {e}") from e

        model = DecisionFeedbackTransformer(config)
        state = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=int))
            if entry["offset"] + 4 * count > len(payload):
                raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
            array = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
            state[entry["name"]] = torch.from_numpy(array.astype(np.float32).reshape(entry["shape"]))

        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint tensors do not match the model: {e}") from e

        logger.info("checkpoint_loaded", path=str(self.resolve(path)), phase=phase.value)
        return LoadedCheckpoint(model=model, phase=phase, meta=header.get("meta", {}))

    def _read(self, path: Union[str, Path]):
        source = self.resolve(path)
        if not source.is_file():
            raise CheckpointError(f"checkpoint not found: {source}")

        raw = source.read_bytes()
        if len(raw) < self._PREFIX.size:
            raise CheckpointError(f"checkpoint is truncated: {source}")
        magic, version, header_length = self._PREFIX.unpack_from(raw)
        if magic != self.MAGIC:
            raise CheckpointError(f"not a detector checkpoint: {source}")
        if version != self.FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} is not supported (expected {self.FORMAT_VERSION})"
            )

        start = self._PREFIX.size
        try:
            header = json.loads(raw[start : start + header_length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint header is unreadable: {e}") from e
        return header, raw[start + header_length :]
