"""Contrastive decoding with probabilistic hallucination detection.

The package bundles an instrumented toy vision-language transformer, a
per-token hallucination feature extractor, logistic and boosted-tree
meta-classifiers, contrastive decoding against their scores, and caption /
yes-no hallucination benchmarks over a synthetic annotated corpus.
"""

__version__ = "0.1.0"

from .decoding import DecodeConfig, apply_apc, apply_ecd, generate
from .detector import DetectorBundle, load_detector, save_detector
from .features import FeatureSchema, assemble_features, build_schema
from .model import (Checkpoint, ForwardTrace, ModelConfig, PromptState,
                    forward_step, init_model, load_checkpoint, save_checkpoint)

__all__ = [
    "__version__",
    "Checkpoint", "DecodeConfig", "DetectorBundle", "FeatureSchema",
    "ForwardTrace", "ModelConfig", "PromptState",
    "apply_apc", "apply_ecd", "assemble_features", "build_schema",
    "forward_step", "generate", "init_model", "load_checkpoint",
    "load_detector", "save_checkpoint", "save_detector",
]
