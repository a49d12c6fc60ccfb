"""casttts: a desk-scale mel-spectrogram synthesizer with unified
speech-prompt and text-prompt timbre control.

The generator is a flow-matching transformer; timbre enters through a
single cross-attention pathway fed by either a speech encoder or a
projected caption encoder, trained in three stages.
"""

from .backbone import BlockConfig
from .flow import FlowStep, GuidanceScale, cfg_combine, euler_sample, fm_loss, interpolate
from .inference import SpeechPrompt, SynthesisRequest, synthesize
from .model import TtsModel, build_variant
from .timbre import Caption

__version__ = "0.1.0"

__all__ = [
    "BlockConfig",
    "Caption",
    "FlowStep",
    "GuidanceScale",
    "SpeechPrompt",
    "SynthesisRequest",
    "TtsModel",
    "build_variant",
    "cfg_combine",
    "euler_sample",
    "fm_loss",
    "interpolate",
    "synthesize",
]
