"""tinychirp: memory-bounded screening of field audio for a target bird song.

The engine decides, per 3-second segment, whether the target song is
present: a cheap signal-power gate first, then (optionally) a small
neural classifier whose Conv1D stack is executed point-by-point so that
memory stays proportional to kernel width instead of segment length.
"""

__version__ = "0.1.0"

__all__ = [
    "audio_io",
    "dsp",
    "nn_core",
    "weights_io",
    "streaming_conv",
    "quantization",
    "metrics",
    "budget",
    "pipeline",
    "cli",
]
