"""Mixed-precision bit allocation for tiny transformers: calibration,
scale folding, per-group quantization, SAC search and GGUF export."""

__version__ = "0.1.0"
