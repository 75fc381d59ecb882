"""Scenario-based closed-loop simulation and test harness for a racing autonomy stack."""

__version__ = "0.1.0"
