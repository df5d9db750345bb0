"""Task-oriented feature coding on a synthetic multi-camera world."""

from ._tocom import (
    Checkpoint,
    Dataset,
    TocomError,
    WorldSpec,
    baseline_encode,
    bce,
    decode_symbols,
    encode_symbols,
    evaluate,
    gen_dataset,
    gu_pmf,
    latency_ms,
    moda,
    run_sweep,
    train,
)

__all__ = [
    "Checkpoint",
    "Dataset",
    "TocomError",
    "WorldSpec",
    "baseline_encode",
    "bce",
    "decode_symbols",
    "encode_symbols",
    "evaluate",
    "gen_dataset",
    "gu_pmf",
    "latency_ms",
    "moda",
    "run_sweep",
    "train",
]
