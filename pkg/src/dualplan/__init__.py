"""Dual-planner synergy stack: trajectory bank, chain-of-thought selection/refinement, query compression and time-decoupled planning."""
__version__ = "0.1.0"
