"""Simulation workbench for sensorless preload control of a rotary LVAD."""

__version__ = "0.1.0"
