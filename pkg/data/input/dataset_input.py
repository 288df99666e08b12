import logging
import math
from datetime import date
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from data.models.ssm_models import DataSet
from src.qnmh.errors import DataValidationError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


# ---------------------------
# Dataset CSV
# ---------------------------

def dataset_frame(data: DataSet) -> pd.DataFrame:
    """
    Columns t, y[, x]. With latent states the frame has a t = 0 row holding x_0
    and an empty y; rows t = 1..T hold the observations.
    """
    T = data.T
    if data.states is None:
        return pd.DataFrame({"t": np.arange(1, T + 1), "y": data.observations})
    y = np.concatenate([[np.nan], data.observations])
    return pd.DataFrame({"t": np.arange(0, T + 1), "y": y, "x": data.states})


def write_dataset(data: DataSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(data).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote dataset with T=%d to %s", data.T, path)
    return path


def read_dataset(path: Union[str, Path]) -> DataSet:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"dataset not found: {path}")
    frame = pd.read_csv(path)
    if "y" not in frame.columns or "t" not in frame.columns:
        raise DataValidationError(f"{path}: expected columns t,y[,x], got {list(frame.columns)}")
    states = frame["x"].to_numpy(dtype=float) if "x" in frame.columns else None
    obs = frame.loc[frame["t"] != 0, "y"].to_numpy(dtype=float)
    if not np.all(np.isfinite(obs)):
        raise DataValidationError(f"{path}: non-finite observations")
    if states is not None and states.size != obs.size + 1:
        raise DataValidationError(f"{path}: {states.size} states for {obs.size} observations")
    return DataSet(observations=obs, states=states)


# ---------------------------
# Bitcoin prices
# ---------------------------

class PriceSeriesInput:
    """
    Daily close prices (date,close) turned into percentage log-returns
    y_t = 100 (log s_t - log s_{t-1}), optionally restricted to [start, end].
    """

    def __init__(
        self,
        path: Union[str, Path],
        start: Optional[date] = None,
        end: Optional[date] = None,
        date_column: str = "date",
        price_column: str = "close",
    ):
        self.path = Path(path)
        self.start = start
        self.end = end
        self.date_column = date_column
        self.price_column = price_column
        self.logger = logging.getLogger(self.__class__.__name__)

    def _load(self) -> pd.DataFrame:
        if not self.path.is_file():
            raise DataValidationError(f"price file not found: {self.path}")
        frame = pd.read_csv(self.path)
        missing = {self.date_column, self.price_column} - set(frame.columns)
        if missing:
            raise DataValidationError(f"{self.path}: missing columns {sorted(missing)}")
        frame = frame[[self.date_column, self.price_column]].rename(columns={self.date_column: "date", self.price_column: "close"})
        try:
            frame["date"] = pd.to_datetime(frame["date"]).dt.date
        except (ValueError, TypeError) as exc:
            raise DataValidationError(f"{self.path}: unparseable dates ({exc})") from exc
        return frame

    def _validate(self, frame: pd.DataFrame) -> pd.DataFrame:
        if frame["date"].duplicated().any():
            dup = frame.loc[frame["date"].duplicated(), "date"].iloc[0]
            raise DataValidationError(f"duplicate date {dup}")
        if not frame["date"].is_monotonic_increasing:
            raise DataValidationError("dates must be strictly increasing")
        close = pd.to_numeric(frame["close"], errors="coerce")
        if close.isna().any() or not np.all(np.isfinite(close)):
            raise DataValidationError("prices must be finite numbers")
        if (close <= 0.0).any():
            bad = frame.loc[close <= 0.0, "date"].iloc[0]
            raise DataValidationError(f"non-positive price on {bad}")
        return frame.assign(close=close.astype(float))

    def _window(self, frame: pd.DataFrame) -> pd.DataFrame:
        if self.start is not None:
            frame = frame[frame["date"] >= self.start]
        if self.end is not None:
            frame = frame[frame["date"] <= self.end]
        return frame.reset_index(drop=True)

    def run(self) -> Tuple[DataSet, Dict[str, Any]]:
        frame = self._window(self._validate(self._load()))
        if len(frame) < 2:
            raise DataValidationError(f"need at least two prices, got {len(frame)}")
        returns = log_returns(frame["close"].to_numpy())
        provenance = {
            "source": str(self.path),
            "first_date": frame["date"].iloc[0].isoformat(),
            "last_date": frame["date"].iloc[-1].isoformat(),
            "n_prices": int(len(frame)),
            "T": int(returns.size),
        }
        self.logger.info("Ingested %d returns from %s to %s", returns.size, provenance["first_date"], provenance["last_date"])
        return DataSet(observations=returns), provenance


def log_returns(prices: np.ndarray) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    if np.any(prices <= 0.0):
        raise DataValidationError("prices must be positive")
    return 100.0 * np.diff(np.log(prices))


def ingest_bitcoin(
    path: Union[str, Path],
    start: Optional[date] = None,
    end: Optional[date] = None,
) -> Tuple[DataSet, Dict[str, Any]]:
    return PriceSeriesInput(path, start=start, end=end).run()


def describe(data: DataSet) -> Dict[str, float]:
    y = data.observations
    return {
        "T": int(data.T),
        "mean": float(np.mean(y)),
        "sd": float(np.std(y, ddof=1)) if y.size > 1 else 0.0,
        "min": float(np.min(y)),
        "max": float(np.max(y)),
        "mean_se": float(np.std(y, ddof=1) / math.sqrt(y.size)) if y.size > 1 else math.inf,
    }
