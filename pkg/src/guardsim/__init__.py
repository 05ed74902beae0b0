"""guardsim: deterministic discrete-event simulation of guard-proxy
protection for constrained CoAP networks under denial-of-service attacks."""

__version__ = "0.1.0"

from .harness import (SimConfig, config_from_dict, load_config, run_cell,
                      run_matrix, classify_behavior, energy_report)

__all__ = [
    "SimConfig", "config_from_dict", "load_config", "run_cell", "run_matrix",
    "classify_behavior", "energy_report", "__version__",
]
