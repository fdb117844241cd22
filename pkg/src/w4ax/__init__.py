"""Mixed-precision W4A4/W4A8 quantization, packing, GEMM and scheduling on numpy."""

__version__ = "0.1.0"
