from .kernel import RunResult, Simulation, run
from .link import Direction, LinkState
from .timeline import (Timeline, iterate_decode_kvswap, iterate_decode_mirage,
                       layer_durations, make_group, run_layers)

__all__ = ["RunResult", "Simulation", "run", "Direction", "LinkState", "Timeline",
           "iterate_decode_kvswap", "iterate_decode_mirage", "layer_durations",
           "make_group", "run_layers"]
