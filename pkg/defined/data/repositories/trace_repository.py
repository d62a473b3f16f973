from pathlib import Path
from typing import List, Union

import pandas as pd
import structlog

from defined.data.models import TracePoint

logger = structlog.get_logger()


class TraceRepository:
    """Training loss traces as CSV (step, phase, loss)"""

    def __init__(self, base_dir: Union[str, Path] = "."):
        self.base_dir = Path(base_dir)

    def resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def save(self, trace: List[TracePoint], path: Union[str, Path]) -> Path:
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(
            {
                "step": [p.step for p in trace],
                "phase": [p.phase for p in trace],
                "loss": [repr(float(p.loss)) for p in trace],
            }
        )
        frame.to_csv(target, index=False)
        logger.info("trace_saved", path=str(target), steps=len(trace))
        return target

    def load(self, path: Union[str, Path]) -> List[TracePoint]:
        frame = pd.read_csv(self.resolve(path), dtype={"step": int, "phase": str, "loss": float})
        return [TracePoint(step=int(r.step), phase=r.phase, loss=float(r.loss)) for r in frame.itertuples(index=False)]
