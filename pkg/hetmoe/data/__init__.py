"""
Synthetic heterogeneous datasets and the weighted two-step sampler.
"""
from hetmoe.models.schemas import default_datasets as default_suite
from hetmoe.models.schemas import default_downstream

from .synthetic import Batch, SyntheticSplit, generate
from .sampler import (
    BatchCursor,
    BatchPrefetcher,
    HeterogeneousStream,
    StreamItem,
    next_batch,
    sample_dataset,
)

__all__ = [
    'Batch',
    'SyntheticSplit',
    'generate',
    'BatchCursor',
    'BatchPrefetcher',
    'HeterogeneousStream',
    'StreamItem',
    'next_batch',
    'sample_dataset',
    'default_suite',
    'default_downstream',
]
