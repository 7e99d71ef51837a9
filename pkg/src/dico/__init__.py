"""Semi-supervised 3D vessel segmentation toolkit.

Two heterogeneous sub-networks co-train by swapping teacher/student roles
every iteration, helped by a multi-view input decomposition for the second
network and an adversarial critic that judges depth-axis maximum-intensity
projections of predicted masks against projections of real labels.
"""

__version__ = "0.1.0"
