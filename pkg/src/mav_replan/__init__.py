"""Trajectory replanning toolkit for a two-stage Mars ascent vehicle under
thrust-drop faults."""

__version__ = "0.1.0"
