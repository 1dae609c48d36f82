"""Continual incremental training of feature classifiers over variable-size data chunks."""

__version__ = "0.1.0"

from ._backend import NAME as BACKEND  # noqa: E402
from .data_io import Dataset, SynthSourceSpec, load_dataset, save_dataset, synth_sources  # noqa: E402
from .errors import IncremadError  # noqa: E402
from .runner import GridResult, RunConfig, RunResult, grid_sweep, run_scenario  # noqa: E402
from .stream import SizeSchedule, build_stream  # noqa: E402
from .strategies import StrategyConfig  # noqa: E402

__all__ = [
    "BACKEND", "Dataset", "GridResult", "IncremadError", "RunConfig", "RunResult",
    "SizeSchedule", "StrategyConfig", "SynthSourceSpec", "build_stream", "grid_sweep",
    "load_dataset", "run_scenario", "save_dataset", "synth_sources",
]
