"""
locdisc - Semi-supervised kernel feature learning with locally discriminative cliques
"""

__version__ = "0.1.0"
