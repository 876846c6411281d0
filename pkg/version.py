__version__ = "0.2.0"

__changelog__ = {
    "0.2.0": [
        "Distances: top-k self-moment volumes, zero rows and columns dropped before sketching, tiled batched SVDs, jackknife standard errors",
        "Grouping: noise-aware pair tests, clique families, auto epsilon raised after a stalled round",
        "Outputs: every written file carries the version and run configuration",
        "Moments: sample pair and triple moments memoised",
    ],
    "0.1.0": [
        "Pipeline: information distances, MST groups, local recursive grouping with triplet tensor decomposition, union-path merge and label alignment",
        "Distances: exact or sparse-sketch randomized SVD, fanned out over a thread pool; output independent of --threads",
        "MST: Prim (default) or Borůvka with parallel cheapest-edge search under one total edge order",
        "Alignment: per-node triplet matching, in-group labelling convention, cross-group joint projected to the nearest permutation",
        "Oracle: random identifiable models (balanced, caterpillar, bounded-degree), ancestral sampler, exact moments and distances",
        "Evaluation: Robinson-Foulds over leaf bipartitions and permutation-aligned parameter error",
        "CLI: gen / learn / eval with JSON on stdout, logs on stderr, exit codes 1/2/3",
        "Input: sparse (JSON header + sample_id,var_id,coord,value) and dense CSV, optional group map",
    ],
}
