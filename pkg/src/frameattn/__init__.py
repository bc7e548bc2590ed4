"""Sequential frame classification with intra-/inter-frame attention.

Subpackage map: ``tensor`` (autodiff core), ``model`` (the attention
network), ``losses`` (cross-entropy / focal / combined + mean F1),
``data`` (CSV ingestion, windowing, synthetic generator), ``batching``
(time-sequential and shuffled batch plans), ``training`` (AdamW loop,
checkpoints), ``cli`` (operator commands).
"""

from .tensor import Tensor, backward, gradcheck

__all__ = ["Tensor", "backward", "gradcheck"]
__version__ = "0.1.0"
