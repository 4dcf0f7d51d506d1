"""Multi-expert region-based object detection at desk scale.

The pipeline: exhaustive and sparse RoI sources, aspect-ratio routing to
H/S/V experts, per-expert minibatch sampling, a small numpy network with
RoI max pooling and expert heads, and VOC/COCO-style evaluation.
"""

__version__ = "0.1.0"
