"""Continual self-supervised speech representation learning, desk scale.

Masked-contrastive pretraining of a conv frontend + transformer encoder +
Gumbel-Softmax quantizer, CTC finetuning, and four continual-learning
strategies (warm start, multi-head, multi-head + L2 anchor, adapters) over a
sequence of language tasks.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, grad_check, no_grad  # noqa: F401
from .errors import ConfigError, DataError, SpeechCLError  # noqa: F401
