"""Patch-based CNN brain tumor segmentation on multi-modal MRI, in numpy."""

from .architectures import (
    ARCH_NAMES,
    ArchConfig,
    AverageNetwork,
    CascadeNetwork,
    Network,
    build,
    build_graph,
    load_segmenter,
    make_model,
    save_segmenter,
)
from .datapipe import BrainVolume, load_volume, make_phantom, preprocess, sample_patches, save_volume
from .inference import predict_slice_dense, predict_volume, remove_flat_blobs
from .kernels import KernelBank, ShapeError
from .netgraph import ModelGraph, ParameterStore, backward, forward, load_model, save_model
from .trainer import TrainConfig, train_model

__version__ = "0.1.0"
