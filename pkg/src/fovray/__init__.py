"""Foveated sparse volume rendering with neural full-frame reconstruction.

The pipeline: tileable blue-noise stacks drive per-frame binary sample
masks whose density falls off exponentially away from a focal point; a
ray-marching renderer fills only the masked pixels (naively, by direct
stochastic draws, or through stream compaction); and a recurrent
hybrid direct/kernel-prediction network restores the full frame.
Benchmarks quantify compression, quality, and temporal stability, and a
small service streams live frames to an interactive viewer.
"""

__version__ = "0.1.0"
