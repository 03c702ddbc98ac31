"""Foreground-aware few-shot evaluation toolkit.

Thin Python layer over the C++ core. Feature arrays are NumPy float64; crops
of one image are the rows of a 2-D array.
"""

from ._core import (
    CosocError,
    cc_loss,
    cc_pn_score,
    cosine_sim,
    crop_plan,
    enforce_min_area,
    foreground_scores,
    kmeans,
    l2_normalize,
    load_store,
    manifest,
    match_query,
    mean_ci,
    pairwise_cos,
    run_benchmark,
    run_cli,
    sample_crops,
    seek_store,
    shared_prototype_bruteforce,
    shared_prototype_iterative,
    sorted_prototypes,
    synth,
    topk_and_fusion,
    version,
    world_config,
)

__version__ = version()

__all__ = [
    "CosocError",
    "cc_loss",
    "cc_pn_score",
    "cosine_sim",
    "crop_plan",
    "enforce_min_area",
    "foreground_scores",
    "kmeans",
    "l2_normalize",
    "load_store",
    "manifest",
    "match_query",
    "mean_ci",
    "pairwise_cos",
    "run_benchmark",
    "run_cli",
    "sample_crops",
    "seek_store",
    "shared_prototype_bruteforce",
    "shared_prototype_iterative",
    "sorted_prototypes",
    "synth",
    "topk_and_fusion",
    "version",
    "world_config",
]
