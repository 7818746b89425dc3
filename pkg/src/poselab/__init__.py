"""poselab: 6D object pose annotation for RGB(-D) image streams.

Multi-view silhouette overlays for human alignment, IoU-maximizing twist
search for refinement, label propagation and dataset export, plus a full
pose-error evaluation suite.
"""

__version__ = "0.1.0"
