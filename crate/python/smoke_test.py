#!/usr/bin/env python3
"""Smoke test for the Python bindings.

Builds the extension module (cargo), loads it, and exercises the main
types and operations end to end. Exits nonzero on the first failure.
"""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "hijacklab-python", "--release"],
        cwd=REPO,
        check=True,
    )
    built = REPO / "target" / "release" / "libhijacklab.so"
    if not built.exists():  # macOS fallback
        built = REPO / "target" / "release" / "libhijacklab.dylib"
    target = Path(__file__).resolve().parent / "hijacklab.so"
    shutil.copy2(built, target)
    return target


def main() -> None:
    build_extension()
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    import hijacklab as hl

    # datasets: generation, determinism, splitting
    ds = hl.generate_dual_blobs(4, 8, 8, 8, 4.0, 6.0, 0.3, seed=1)
    assert len(ds) == 4 * 8 * 8
    assert ds.feature_dim == 8
    again = hl.generate_dual_blobs(4, 8, 8, 8, 4.0, 6.0, 0.3, seed=1)
    assert ds.sample(17) == again.sample(17), "generation must be deterministic"
    train_ds, test_ds = ds.split(0.7, seed=99, stratify_by="original")
    assert len(train_ds) + len(test_ds) == len(ds)
    print("[PASS] dataset generation, determinism, and splits")

    # network: build, forward, taps, save/load round-trip
    net = hl.build_network([8, 32, 4], activation="relu", init="he", seed=2)
    assert net.param_count() == 8 * 32 + 32 + 32 * 4 + 4
    hidden, logits = net.forward(ds.sample(0)[0])
    assert len(hidden[0]) == 32 and len(logits) == 4
    assert net.tap(ds.sample(0)[0], "last_hidden") == hidden[0]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.bin"
        net.save(path)
        loaded = hl.Network.load(path)
        assert loaded.forward(ds.sample(3)[0]) == net.forward(ds.sample(3)[0])
    print("[PASS] network build, forward, tap, and model file round-trip")

    # training reaches the original task; the attack beats chance
    trained, report = hl.train(net, train_ds, epochs=20, batch_size=16, learning_rate=0.05, seed=3)
    assert report["train_accuracy"] > 0.95
    assert hl.dataset_accuracy(trained, test_ds) > 0.9
    lb = hl.hijack_lower_bound(8)
    assert lb == 0.125
    for source in ("last_hidden", "logits"):
        result = hl.attack(
            trained, test_ds, source=source, metric="l2", n_max=5, samples_per_class=3, seed=4
        )
        assert result["m"] == 8
        assert result["top_n"][0] >= 2 * lb, f"{source} attack too weak: {result['top_n']}"
        assert result["top_n"] == sorted(result["top_n"]), "top-N must be monotone"
    print("[PASS] training and the distance-rule attack beat chance on both sources")

    # untrained random network still beats chance
    random_net = hl.build_network([8, 32, 4], init="gaussian", sigma=0.5, seed=5)
    result = hl.attack(random_net, test_ds, source="last_hidden", n_max=1, samples_per_class=3, seed=4)
    assert result["top_n"][0] >= 2 * lb
    print("[PASS] random-network hijacking beats chance")

    # meta-unlearning with beta = 0 equals plain training
    plain, _ = hl.train(net, train_ds, epochs=5, batch_size=16, learning_rate=0.05, seed=6)
    degenerate, _ = hl.meta_unlearn_train(
        net, train_ds, epochs=5, batch_size=16, seed=6, alpha=0.05, beta=0.0
    )
    probe = test_ds.sample(0)[0]
    assert plain.forward(probe) == degenerate.forward(probe)
    print("[PASS] meta-unlearning degenerates to plain training at beta = 0")

    # small algebra: pearson, distances, truncation, TOPSIS
    assert abs(hl.pearson([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) + 1.0) < 1e-12
    assert math.isnan(hl.pearson([1.0, 2.0], [5.0, 5.0]))
    assert hl.distance([3.0, 4.0], [0.0, 0.0], "l2") == 5.0
    assert hl.truncate_logits([3.0, 9.0, 5.0], 1) == [3.0, 9.0, 3.0]
    selected, closeness = hl.topsis_rank([(0.6, 100.0), (0.8, 50.0)])
    assert selected == 1 and abs(closeness[1] - 0.6909830056250526) < 1e-12
    stats = hl.random_projection_check(64, 32, 20, 50, seed=7)
    assert 0.0 < stats["linear_median_max_distortion"] < 1.0
    print("[PASS] pearson, distance, truncation, TOPSIS, and projection checks")

    # whole-study execution from a JSON config
    config = json.loads((REPO / "configs" / "attack.json").read_text())
    with tempfile.TemporaryDirectory() as tmp:
        report_json = hl.run_study(json.dumps(config), output_dir=tmp)
        report = json.loads(report_json)
        assert report["study"] == "attack"
        top_n = report["payload"]["attack"]["attack"]["top_n"]
        assert top_n[0] >= 3 * lb
        assert (Path(tmp) / "report.json").exists()
        assert (Path(tmp) / "features.csv").exists()
    print("[PASS] run_study executes the bundled attack config end to end")

    print("smoke test: all checks passed")


if __name__ == "__main__":
    main()
