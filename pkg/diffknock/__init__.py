"""
DiffKnock — selección de variables con control de FDR
Knockoffs generados por difusión + estadísticos neuronales antisimétricos + filtro knockoff+.
"""

from diffknock.version import __version__

__all__ = ["__version__"]
