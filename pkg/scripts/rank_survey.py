#!/usr/bin/env python3
"""Empirical rank survey of Hadamard-product adapters vs plain low-rank ones.

Draws random adapters at matched parameter budgets on a square linear layer
and prints the observed reconstruction-rank distribution for each family.
With the defaults (64 x 64, loha dim 4 vs lora dim 8) both families spend
the same parameter count, but the Hadamard product reaches ranks up to the
square of its dim while the plain product is pinned at its dim.
"""

import argparse
import sys
from collections import Counter

import numpy as np

from deltafactor.adapters import (
    LayerShape,
    init_adapter,
    param_count,
    random_adapter,
    reconstruct,
)
from deltafactor.tensor_core import numerical_rank


def survey(algorithm: str, layer: LayerShape, dim: int, draws: int,
           seed_key: tuple) -> Counter:
    counts: Counter = Counter()
    for child in np.random.SeedSequence(seed_key).spawn(draws):
        adapter = random_adapter(algorithm, layer, dim, alpha=float(dim),
                                 seed=child)
        counts[numerical_rank(reconstruct(adapter))] += 1
    return counts


def print_histogram(name: str, counts: Counter, draws: int) -> None:
    print(f"{name}:")
    for rank in sorted(counts):
        n = counts[rank]
        bar = "#" * max(1, round(40 * n / draws))
        print(f"  rank {rank:3d}: {n:5d}  {bar}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=64,
                        help="square layer extent")
    parser.add_argument("--loha-dim", type=int, default=4)
    parser.add_argument("--lora-dim", type=int, default=8)
    parser.add_argument("--draws", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if args.draws < 1:
        parser.error("--draws must be positive")

    layer = LayerShape("linear", args.size, args.size)
    budgets = {
        "loha": param_count(init_adapter("loha", layer, args.loha_dim,
                                         alpha=float(args.loha_dim))),
        "lora": param_count(init_adapter("lora", layer, args.lora_dim,
                                         alpha=float(args.lora_dim))),
    }
    print(f"layer {args.size}x{args.size}: loha dim {args.loha_dim} uses "
          f"{budgets['loha']} params, lora dim {args.lora_dim} uses "
          f"{budgets['lora']} params")
    for idx, (algorithm, dim) in enumerate(
            (("loha", args.loha_dim), ("lora", args.lora_dim))):
        counts = survey(algorithm, layer, dim, args.draws, (args.seed, idx))
        print_histogram(f"{algorithm} dim {dim} ({args.draws} draws)",
                        counts, args.draws)
    return 0


if __name__ == "__main__":
    sys.exit(main())
