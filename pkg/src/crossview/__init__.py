"""Cross-view ground-to-aerial retrieval with geometric layout descriptors."""

from .geometry import (
    ALL_LAYOUTS,
    IDENTITY_LAYOUT,
    LayoutParams,
    SemanticParams,
    aerial_layout_op,
    compose_layouts,
    panorama_layout_op,
    polar_transform,
    semantic_augment,
)
from .model import CrossViewModel, GLEConfig, ModelConfig, build_model, modulate
from .losses import LossConfig, counterfactual_loss, exhaustive_triplet_loss, total_loss
from .data import PairManifest, PairRecord, SyntheticSpec, dedup, generate_synthetic, load_manifest
from .sampling import build_batch, build_chsg_batch, hard_sample_eval_set
from .retrieval import EmbeddingMatrix, compute_metrics, knn, recall_at_k
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"
