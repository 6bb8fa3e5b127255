"""Microstructure image analysis and hardness regression for Mg-Gd alloys."""
__version__ = "0.1.0"
