"""Crowded-scene simulation, convex-hull feature regularization and
language-anchored contrastive training for point clouds.

Submodules are imported explicitly (``scenehull.geometry``, ``scenehull.scene``,
...) so the CLI can configure BLAS threading before numpy loads.
"""

__version__ = "0.1.0"
