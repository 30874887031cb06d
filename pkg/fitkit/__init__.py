# FITKit: Fisher Information Trace sensitivity analysis for mixed-precision quantization.
__version__ = "0.1.0"
