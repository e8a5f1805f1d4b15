"""ShuffleCANet face-mask detection on a small numpy autodiff engine."""
from .anchors import AnchorKMeans, AnchorSet, kmeans_anchors
from .config import RunConfig, desk_config, full_scale_model
from .estimator import MaskDetector
from .metrics import EvalReport, evaluate
from .model import Detector
from .pipeline import bench, detect
from .train import train
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AnchorKMeans", "AnchorSet", "Detector", "EvalReport", "MaskDetector", "RunConfig", "bench", "desk_config",
    "detect", "evaluate", "kmeans_anchors", "load_weights", "full_scale_model", "save_weights", "train",
]
