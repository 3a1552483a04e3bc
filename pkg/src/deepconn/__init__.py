"""Joint user/item review-text rating model with hand-written gradients."""

from .evaluation import mse
from .ingest import ReviewRecord, load_reviews, split_corpus
from .model import DeepConnModel, ModelConfig, VariantKind, make_variant

__all__ = ["DeepConnModel", "ModelConfig", "ReviewRecord", "VariantKind", "load_reviews", "make_variant",
           "mse", "split_corpus"]
__version__ = "0.1.0"
