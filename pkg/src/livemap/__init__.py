"""Live edge map with coverage-constrained, learned task offloading for connected vehicles."""
from .config import ScenarioConfig, load_config
from .experiment import run, sweep, train

__version__ = "0.1.0"

__all__ = ["ScenarioConfig", "load_config", "run", "sweep", "train", "__version__"]
