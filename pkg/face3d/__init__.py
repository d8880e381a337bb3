"""
Expression-aware gender analysis on 3D face scans
face3d/__init__.py
"""

__version__ = "1.0.0"
