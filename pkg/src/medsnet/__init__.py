"""Multi-encoder self-distillation network for lung nodule detection in CT.

Modules
-------
preprocess  lung masking, HU windowing, z-resampling, cropping
mip         bidirectional maximum intensity projections
model       dense block, encoders, attention decoder, detector heads
losses      deep-supervised dice with self-distillation terms
trainer     fold plan, patch sampling, optimisation loop
candidates  candidate extraction and auxiliary-detector FP reduction
froc        matching, FROC curves, CPM
phantom     synthetic thorax phantoms
ablation    variant presets and the phantom benchmark
cli         command-line entry point
"""
from .model import MEDSNet, ModelConfig
from .volume import Annotation, CTVolume, NormalizedVolume

__version__ = "0.1.0"

__all__ = ["MEDSNet", "ModelConfig", "Annotation", "CTVolume", "NormalizedVolume", "__version__"]
