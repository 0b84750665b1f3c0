"""Distributed mechanisms for unicast and multirate multicast rate allocation.

Agents on a message tree exchange small messages; a radial allocation and
quadratic-penalty taxes make every Nash equilibrium of the induced game
reproduce the centrally efficient rates.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .equilibrium import (
    audit_ne_properties,
    best_response,
    construct_ne,
    deviation_fuzz,
    run_dynamics,
    verify_ne,
)
from .graph import MessageTree
from .instance import MMTP, UTP, AgentSpec, LinkSpec, ProblemInstance, validate_instance
from .io import load_instance, save_instance
from .mmtp import MmtpMechanism
from .oracle import brute_force_solve, solve_mmtp, solve_utp
from .utp import UtpMechanism
from .valuations import ValuationSpec

__all__ = [
    "MMTP", "UTP", "AgentSpec", "LinkSpec", "MessageTree", "MmtpMechanism", "ProblemInstance",
    "UtpMechanism", "ValuationSpec", "audit_ne_properties", "best_response", "brute_force_solve",
    "construct_ne", "deviation_fuzz", "load_instance", "run_dynamics", "save_instance",
    "solve_mmtp", "solve_utp", "validate_instance", "verify_ne",
]
