"""Feature Gaussian splatting in NumPy.

Fit 3D Gaussians that carry low-dimensional feature vectors (plus a small
convolutional decoder) to posed images and 2D feature maps, render them
from new views, fine-tune a 2D patch encoder on those renders, and probe
the resulting features with linear heads.
"""

from .extractor import FeatureExtractor, FileBackedExtractor, FinetuneConfig, SceneLibrary, ToyPatchEncoder, \
    finetune, mean_target_l1, multiview_consistency
from .probe import assemble, metrics_depth, metrics_seg, pca_visualize, predict_depth, train_depth_probe, \
    train_seg_probe
from .raster import rasterize_backward, rasterize_features, rasterize_reference, rasterize_rgb
from .scene import CameraView, ConfigurationError, FeatureDecoder, Gaussian3D, Scene, covariance_3d, \
    decoder_apply, project_gaussian
from .trainer import DivergenceError, FitConfig, fit_scene

__version__ = "0.1.0"

__all__ = [
    "CameraView", "ConfigurationError", "DivergenceError", "FeatureDecoder", "FeatureExtractor",
    "FileBackedExtractor", "FinetuneConfig", "FitConfig", "Gaussian3D", "Scene", "SceneLibrary", "ToyPatchEncoder",
    "assemble", "covariance_3d", "decoder_apply", "finetune", "fit_scene", "mean_target_l1", "metrics_depth",
    "metrics_seg", "multiview_consistency", "pca_visualize", "predict_depth", "project_gaussian",
    "rasterize_backward", "rasterize_features", "rasterize_reference", "rasterize_rgb", "train_depth_probe",
    "train_seg_probe",
]
