"""Pre-sequencing validation for optimistic rollups.

Semantic rules (a small decidable DSL), cross-layer state pre-synchronization,
threshold-encrypted fair ordering with slashing evidence, and a simulation
harness that measures all three.
"""

__version__ = "0.1.0"

from .regspec import RuleSet, parse_rules, validate_semantic
from .presync import L1Cache, validate_state
from .ordering import verify_and_release, verify_evidence

__all__ = [
    "RuleSet",
    "parse_rules",
    "validate_semantic",
    "L1Cache",
    "validate_state",
    "verify_and_release",
    "verify_evidence",
    "__version__",
]
