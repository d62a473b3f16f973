# Repository package
from .checkpoint_repository import CheckpointRepository, LoadedCheckpoint
from .curve_repository import CurveRepository
from .manifest_repository import ManifestRepository
from .trace_repository import TraceRepository

__all__ = [
    'CheckpointRepository',
    'LoadedCheckpoint',
    'CurveRepository',
    'ManifestRepository',
    'TraceRepository'
]
