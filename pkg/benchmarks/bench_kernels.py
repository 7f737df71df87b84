#!/usr/bin/env python3
"""Compare the numba kernels against the pure-numpy fallback.

Same entry point as `lesiondet bench`; kept as a standalone script so it
can run without installing the console script.
"""
from lesiondet.benchmark import run_benchmark

if __name__ == "__main__":
    run_benchmark()
