"""Dataflow IR toolkit for small deep learning graphs.

Imports operator graphs, lowers them to an explicit-data-movement IR,
derives backward passes symbolically, and reduces data movement through a
catalog of graph transformations. A reference interpreter executes any
stage of the pipeline so every rewrite can be checked numerically.
"""

__version__ = "0.1.0"
