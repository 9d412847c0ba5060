"""voxdet: multi-modality 3D detection in a shared voxel space.

Camera features are lifted into a metric voxel grid with predicted depth
distributions, point clouds are voxelized into the same grid, the two spaces
interact (knowledge transfer, fusion), and a deformable-attention decoder
reads objects out of the unified volume.  Everything runs on synthetic
scenes with oracle, invariant, and gradient verification.
"""

__version__ = "0.1.0"
