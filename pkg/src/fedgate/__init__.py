"""fedgate: an OpenAI-compatible inference gateway federated over simulated
HPC clusters, with auto-scaling, hot-node lifecycle, batch mode, and a
benchmark harness."""

from .config import Config, load_config, load_config_file
from .simclock import VirtualTimeEventLoop, run_virtual
from .stack import ServiceStack, build_stack

__all__ = [
    "Config",
    "ServiceStack",
    "VirtualTimeEventLoop",
    "build_stack",
    "load_config",
    "load_config_file",
    "run_virtual",
]

__version__ = "0.1.0"
