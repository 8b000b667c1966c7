"""Numerical laboratory for the normalized Kähler-Ricci flow on toric Fano manifolds (package: krflow)"""

from __future__ import annotations

__version__ = "0.1.0"
