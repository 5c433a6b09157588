"""Hash-table memory layers: hashing primitives, memory-layer forward and FLOPs/storage accounting."""

from ._core import (
    NonFiniteError,
    __version__,
    bucket_weight,
    bucket_weight_grad,
    bucket_weight_naive,
    crossover_ratio,
    decode_index,
    encode_index,
    flops_memoryformer_block,
    flops_standard_block,
    gradcheck,
    hash_chunk,
    memory_block_bytes,
    memory_forward,
    sign_binarize,
    synthetic_bucket_counts,
    table_memory_bytes,
)

__all__ = [
    "NonFiniteError",
    "bucket_weight",
    "bucket_weight_grad",
    "bucket_weight_naive",
    "crossover_ratio",
    "decode_index",
    "encode_index",
    "flops_memoryformer_block",
    "flops_standard_block",
    "gradcheck",
    "hash_chunk",
    "memory_block_bytes",
    "memory_forward",
    "sign_binarize",
    "synthetic_bucket_counts",
    "table_memory_bytes",
]
