"""Adversarial camouflage texture toolkit.

Projects a small repeating texture onto objects through depth-derived
triplanar coordinates, refines the result with a learned texture renderer,
and optimizes the texels so a toy detector stops firing, all in plain numpy.
"""

__version__ = "0.1.0"
