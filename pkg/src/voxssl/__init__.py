"""Self-supervised pretraining for volumetric data.

Masked patch reconstruction combined with global and per-patch
student-teacher alignment on a small 3D vision transformer, plus the
downstream probes (classification, segmentation) used to measure transfer.
"""

__version__ = "0.1.0"
