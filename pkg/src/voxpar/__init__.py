"""voxpar: rank-simulated hybrid-parallel training for 3D CNNs.

Data-parallel groups x spatial partitions, distributed convolution with halo
exchange, hyperslab-parallel ingestion with an in-memory distributed cache,
and an analytic per-layer performance model - all validated against serial
oracles at desk scale.
"""

__version__ = "0.1.0"
