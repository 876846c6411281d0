"""End-to-end learning: distances, MST, local grouping, merge, alignment, parameters."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import accumulate

from latree.config import RunConfig
from latree.distances import DistanceMatrix, all_pairs_distances
from latree.logging_setup import event
from latree.lrg import LocalSubtree, local_recursive_grouping
from latree.merge import AlignedGroups, align_groups, finalize_parameters, merge_all
from latree.model import LatentTree, check_invariants
from latree.moments import MomentSource
from latree.mst import Group, MstGraph, build_mst, extract_groups, group_stats

logger = logging.getLogger("latree.pipeline")


@dataclass
class LearnResult:
    tree: LatentTree
    distances: DistanceMatrix
    mst: MstGraph
    groups: list[Group]
    subtrees: list[LocalSubtree]
    aligned: AlignedGroups
    report: dict = field(default_factory=dict)


def id_blocks(groups: list[Group], p: int) -> list[int]:
    """First hidden id of each group; blocks are disjoint and fixed before any work starts."""
    sizes = [len(g.members) for g in groups]
    return [p + offset for offset in accumulate([0, *sizes[:-1]])]


def learn(
    source: MomentSource, config: RunConfig, observed: list[int] | None = None
) -> LearnResult:
    if observed is None:
        observed = list(source.observed)  # type: ignore[attr-defined]
    p = len(observed)
    if observed != list(range(p)):
        raise ValueError("observed nodes must be numbered 0..p-1")
    timings: dict[str, float] = {}
    started = time.perf_counter()

    t0 = time.perf_counter()
    dist = all_pairs_distances(
        source,
        config.k,
        svd_mode=config.svd_mode,
        alpha=config.alpha,
        seed=config.seed,
        threads=config.threads,
        nodes=observed,
        stderr_blocks=config.jackknife_blocks if config.epsilon == "auto" else 0,
    )
    timings["distances"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    mst = build_mst(dist, algorithm=config.mst_algorithm, threads=config.threads)
    groups = extract_groups(mst)
    timings["mst"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bases = id_blocks(groups, p)
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        subtrees = list(
            pool.map(
                lambda args: local_recursive_grouping(args[0], dist, source, config, args[1]),
                zip(groups, bases),
            )
        )
    timings["lrg"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    merged = merge_all(subtrees, mst, parallel=config.merge_parallel, threads=config.threads)
    aligned = align_groups(merged, mst)
    timings["merge"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    final = finalize_parameters(merged, aligned, [source.dim(i) for i in observed])
    tree = final.tree
    tree.family = config.family
    tree.noise = config.noise if config.family == "gaussian" else 0.0
    timings["finalize"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - started

    low_confidence = list(aligned.low_confidence)
    for sub in subtrees:
        low_confidence.extend(sub.flags)
        for h, triplets in sub.triplets.items():
            low_confidence.extend(
                f"hidden {h} triplet {t.views}: {'; '.join(t.notes)}"
                for t in triplets
                if t.low_confidence
            )

    report = {
        "p": p,
        "hidden": len(tree.hidden),
        "groups": len(groups),
        **group_stats(mst),
        "stage_seconds": {name: round(sec, 6) for name, sec in timings.items()},
        "distances": {
            "infinite": dist.infinite,
            "clamped": dist.clamped,
            "svd_fallbacks": dist.fallbacks,
            "stderr": dist.stderr is not None,
        },
        "mst_weight": mst.weight,
        "reference_leader": aligned.reference,
        "low_confidence": low_confidence,
        "warnings": final.warnings,
        "invariant_violations": check_invariants(tree, atol=1e-6),
    }
    event("learn", p=p, hidden=len(tree.hidden), groups=len(groups), seconds=timings["total"])
    return LearnResult(tree, dist, mst, groups, subtrees, aligned, report)
