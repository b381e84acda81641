"""
graphalign - Few-shot object alignment with graph energy models

Learns, from a handful of demonstrations, where one object should be placed
relative to another. Point clouds are encoded into local equivariant features,
assembled into a heterogeneous graph with the demonstrations and scored by
rotation and translation energy models; Langevin dynamics on SE(3) finds the
lowest-energy placement.
"""

__version__ = "0.1.0"
__author__ = "graphalign developers"
