import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

import pandas as pd
import structlog

from defined.data.models import CurvePoint, EvalCurve

logger = structlog.get_logger()

GAIN_ROW = "gain_df"


class CurveRepository:
    """SER curves as CSV: length, ser, stderr, then a gain_df footer row"""

    COLUMNS = ["length", "ser", "stderr"]

    def __init__(self, base_dir: Union[str, Path] = "."):
        self.base_dir = Path(base_dir)

    def resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def save(self, curve: EvalCurve, path: Union[str, Path]) -> Path:
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)

        frame = pd.DataFrame(
            [(p.length, repr(float(p.ser)), repr(float(p.stderr))) for p in curve.points], columns=self.COLUMNS
        )
        footer = pd.DataFrame(
            [(GAIN_ROW, "" if curve.gain_df is None else repr(float(curve.gain_df)), "")], columns=self.COLUMNS
        )
        pd.concat([frame, footer], ignore_index=True).to_csv(target, index=False)

        logger.info("curve_saved", path=str(target), method=curve.method, points=len(curve.points))
        return target

    def load(self, path: Union[str, Path]) -> EvalCurve:
        """Read a curve back; method and setting fields are not stored in the CSV"""

        source = self.resolve(path)
        frame = pd.read_csv(source, dtype=str, keep_default_na=False)
        is_footer = frame["length"] == GAIN_ROW
        points = [
            CurvePoint(length=int(row.length), ser=float(row.ser), stderr=float(row.stderr))
            for row in frame[~is_footer].itertuples(index=False)
        ]
        gain = None
        if is_footer.any():
            value = frame[is_footer]["ser"].iloc[0]
            gain = float(value) if value != "" else None
        return EvalCurve(
            method=source.stem, modulation="", snr_db=math.nan, k=0, points=points, gain_df=gain
        )

    def join(self, paths: Sequence[Union[str, Path]], labels: Optional[List[str]] = None) -> pd.DataFrame:
        """
        Wide table of several curves on their union of lengths

        Columns are <label>_ser and <label>_stderr; the last row carries each
        curve's gain_df in its _ser column.
        """
        labels = labels or [Path(p).stem for p in paths]
        if len(labels) != len(paths):
            raise ValueError("need one label per curve")

        columns = []
        gains = {}
        for label, path in zip(labels, paths):
            curve = self.load(path)
            columns.append(
                pd.DataFrame(
                    {f"{label}_ser": [p.ser for p in curve.points], f"{label}_stderr": [p.stderr for p in curve.points]},
                    index=pd.Index(curve.lengths(), name="length"),
                )
            )
            gains[f"{label}_ser"] = curve.gain_df

        wide = pd.concat(columns, axis=1).sort_index()
        wide.index = wide.index.astype(object)
        wide.loc[GAIN_ROW] = pd.Series(gains)
        logger.info("curves_joined", curves=len(paths), lengths=len(wide) - 1)
        return wide.reset_index()

    def save_joined(self, table: pd.DataFrame, path: Union[str, Path]) -> Path:
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(target, index=False)
        return target
