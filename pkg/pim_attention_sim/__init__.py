"""
Crossbar Processing-in-Memory Sparse Attention Simulator

This package simulates a ReRAM crossbar accelerator running transformer attention:
it generates the attention mask on a quantized pruning path, schedules the SDDMM
and SpMM kernels onto the arrays, list-schedules the whole dataflow, and reports
latency, energy, wait-for-write time and parallelism for the sparse mode and
its dense comparison modes.
"""

__version__ = "1.0.0"
