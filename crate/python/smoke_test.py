#!/usr/bin/env python3
"""Smoke test for the lsb_py extension module.

Builds nothing itself: run `cargo build -p lsb-py` first (or pass --release
and build that profile). The script copies the produced shared library next
to a temp dir as lsb_py.so and imports it, so no maturin install is needed.
"""

import argparse
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module(profile: str):
    built = REPO / "target" / profile / "liblsb_py.so"
    if not built.exists():
        sys.exit(f"{built} not found; run `cargo build -p lsb-py` first")
    staging = Path(tempfile.mkdtemp(prefix="lsb_py_"))
    shutil.copy2(built, staging / "lsb_py.so")
    sys.path.insert(0, str(staging))
    import lsb_py

    return lsb_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--profile", default="debug", choices=["debug", "release"])
    args = parser.parse_args()
    lsb = import_module(args.profile)

    # Acquisition functions on hand values.
    approx(lsb.acquisition_score([0.25, 0.25, 0.25, 0.25], "max_entropy"), math.log(4))
    approx(lsb.acquisition_score([1.0, 0.0, 0.0, 0.0], "margin"), -1.0)
    approx(lsb.acquisition_score([0.164, 0.003, 0.110, 0.721], "least_confident"), 0.279)
    approx(lsb.expected_score([0.164, 0.003, 0.110, 0.721]), 2.386)
    approx(lsb.multiclass_loss([0.164, 0.003, 0.110, 0.721], 0), 2.386)
    print("ok acquisition functions")

    # Metrics.
    approx(lsb.beta_variance(0, 0), 1.0 / 12.0)
    approx(lsb.roc_auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]), 1.0)
    report = lsb.evaluate([0.9, 0.7, 0.4, 0.2], [True, True, False, False])
    approx(report["auc"], 1.0)
    assert len(report["curve"]) == 6
    print("ok metrics")

    # Distances.
    approx(lsb.pairwise_distance([1.0, 2.0], [4.0, 6.0], "euclidean"), 5.0)
    approx(lsb.pairwise_distance([1.0, 0.0], [0.0, 1.0], "cosine"), 1.0)
    print("ok distances")

    # Gradient check of the fusion kernel.
    err, worst = lsb.grad_check(seed=9)
    assert err <= 1e-5, f"grad check error {err} at {worst}"
    print(f"ok grad check (max rel error {err:.2e})")

    with tempfile.TemporaryDirectory(prefix="lsb_state_") as tmp:
        state = Path(tmp) / "state"
        counts = lsb.generate_corpus(str(state), seed=11)
        assert counts == (600, 3000, 600), counts

        labeled = lsb.SampleSet.load(str(state / "labeled.jsonl"))
        pool = lsb.SampleSet.load(str(state / "pool.jsonl"))
        assert len(labeled) == 600 and len(pool) == 3000
        assert labeled.dims() == (16, 4, None)

        # Round-trip through the packed format.
        labeled.save(str(state / "labeled_packed.json"), format="packed")
        packed = lsb.SampleSet.load(str(state / "labeled_packed.json"), format="packed")
        assert len(packed) == len(labeled)
        print("ok corpus io")

        # Seeds -> k-NN expansion -> lookalike filter.
        seeds = lsb.select_seeds(labeled, quantile=0.05)
        assert len(seeds) == 30
        expansion = lsb.lsb_expand(labeled, pool, quantile=0.05, k=3)
        assert 30 <= len(expansion) <= 90
        model = lsb.LookalikeModel.train(labeled, class_weighting=True, seed=1)
        assert model.auc(labeled) > 0.7
        kept = lsb.lt_filter(model, pool, [e["id"] for e in expansion], threshold=0.5)
        assert 0 < len(kept) <= len(expansion)
        assert all(score >= 0.5 for _, score in kept)
        print(f"ok selection pipeline (lsb {len(expansion)} -> lt {len(kept)})")

        # Nearest neighbor sanity: the nearest pool record to itself is rank 1.
        some_id = pool.ids()[0]
        neighbors = lsb.top_k(pool, some_id, k=3)
        assert len(neighbors) == 3
        assert all(d >= 0 for _, d in neighbors)
        print("ok knn")

        # One short loop end to end.
        rows = lsb.run_loop(str(Path(tmp) / "run"), seed=7, rounds=1,
                            corpus_json='{"labeled_count": 200, "pool_count": 800, "heldout_count": 150}',
                            round_json='{"budgets": {"statistical": 40, "lsb_lt": 10}}')
        assert rows[0]["annotated"] == 50, rows
        assert 0.5 < rows[0]["auc"] <= 1.0
        print(f"ok loop (round 0 auc {rows[0]['auc']:.4f})")

    outcome = lsb.fuse_train("attention", seed=3, epochs=6)
    assert outcome["test_accuracy"] > 0.6, outcome
    print(f"ok fusion training (accuracy {outcome['test_accuracy']:.3f})")

    print("smoke test passed")


if __name__ == "__main__":
    main()
