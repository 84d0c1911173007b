"""Joint encoder / latent-manifold training with diffusion-based retrieval features."""

from .encoder import EncoderModel, forward, backward, init_he
from .extraction import extract, extract_diffused, extract_embedded
from .lmr import lmr_loss_and_grads
from .manifold import ManifoldState, build_sparse_similarity, init_from_projection
from .trainer import TrainConfig, TrainReport, train

__all__ = [
    "EncoderModel",
    "ManifoldState",
    "TrainConfig",
    "TrainReport",
    "backward",
    "build_sparse_similarity",
    "extract",
    "extract_diffused",
    "extract_embedded",
    "forward",
    "init_he",
    "init_from_projection",
    "lmr_loss_and_grads",
    "train",
]

__version__ = "0.1.0"
