"""Dataset I/O, depth-map fusion, evaluation metrics and the ablation grid."""

from .fusion import FusionParams, PointCloud, fuse
from .metrics import CloudMetrics, DepthMetrics, eval_cloud, eval_depth, point_spacing
