"""Order-book microstructure forecasting toolkit.

Pipeline: ingest and align book/trade streams on a 1 s grid, build the ten
microstructure features, fit histogram gradient-boosted trees under purged
walk-forward validation, explain them with exact tree-Shapley values, and
backtest the forecasts with taker, maker and blended execution.
"""

__version__ = "0.1.0"

from .errors import DataError, LobshapError, NumericError

__all__ = ["DataError", "LobshapError", "NumericError", "__version__"]
