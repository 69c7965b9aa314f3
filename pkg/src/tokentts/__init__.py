"""Hierarchical discrete speech tokens for text-to-speech.

Three stages, trained one after another:

* ``fine_codec``: waveform <-> frame features with a 16-layer residual VQ.
* ``coarse_codec``: one token per frame, decoded into distributions over the fine codebooks.
* ``prefix_lm``: phoneme + speaker prefix followed by autoregressive coarse tokens.
"""

from .dsp import SAMPLE_RATE, FRAME_LEN, Waveform
from .fine_codec import FineCodec, FineCodecConfig, fc_bitrate
from .coarse_codec import CoarseCodec, CoarseCodecConfig, cc_bitrate
from .prefix_lm import LMConfig, PrefixLM, build_attention_mask, generate
from .pipeline import Models, load_models, speech_to_tokens, synthesize

__version__ = "0.1.0"

__all__ = [
    "SAMPLE_RATE",
    "FRAME_LEN",
    "Waveform",
    "FineCodec",
    "FineCodecConfig",
    "fc_bitrate",
    "CoarseCodec",
    "CoarseCodecConfig",
    "cc_bitrate",
    "LMConfig",
    "PrefixLM",
    "build_attention_mask",
    "generate",
    "Models",
    "load_models",
    "speech_to_tokens",
    "synthesize",
]
