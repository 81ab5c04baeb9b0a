"""Online RGB-D dense reconstruction: coarse TSDF grid + learned residual field.

The engine tracks the camera against a moving TSDF volume with randomized
pose optimization, fuses a global coarse grid, trains a hash-grid residual
field on top of it, and refines keyframe poses with a residual-pose MLP.
"""

__version__ = "0.1.0"
