"""Rotation-equivariant convolutions on icosahedral sphere meshes.

Library layout:

- geom: ZYZ rotations, canonical frames, tangent-plane charts
- icomesh: subdivided icosahedral meshes, pooling/unpooling maps
- stencil: least-squares derivative stencils on mesh charts
- ops: cyclic-group layer arithmetic (lift/group convolutions, 1x1, batchnorm, pooling)
- oracle: closed-form chart derivatives and exact layer references
- harness: consistency/equivariance measurement and report generation
- train: minimal reverse-mode training engine over the fixed layer vocabulary
- data: synthetic sphere datasets and IDX image projection
- cli: command-line entry points
"""

__version__ = "0.1.0"

MESH_FORMAT_VERSION = 1
STENCIL_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1
