"""Multi-talker transcription on synthetic token-emission mixtures.

A mixture encoder plus separator/serialized-CTC branch produces
first-speaking-first-out prompts that condition a low-rank-adapted causal
decoder, trained with a three-stage recipe and compared against a
serialized-output baseline.
"""

__version__ = "0.1.0"

from .vocab import Vocabulary

__all__ = ["Vocabulary", "__version__"]
