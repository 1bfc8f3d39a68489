#!/usr/bin/env python3
"""Smoke test for the lafr_py extension module.

Builds nothing itself: it locates the compiled cdylib under target/ (build it
first with `cargo build -p lafr-python`), stages it under an importable name,
and drives a miniature end-to-end pipeline.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def stage_module() -> None:
    candidates = [
        REPO_ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("liblafr_py.so", "lafr_py.so", "liblafr_py.dylib")
    ]
    built = next((c for c in candidates if c.exists()), None)
    if built is None:
        sys.exit(
            "lafr_py cdylib not found; run `cargo build -p lafr-python` first"
        )
    stage = Path(tempfile.mkdtemp(prefix="lafr-py-"))
    shutil.copy2(built, stage / "lafr_py.so")
    sys.path.insert(0, str(stage))


stage_module()
import lafr_py  # noqa: E402

failures = []


def check(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
    if not ok:
        failures.append(name)


# --- data generation -------------------------------------------------------
protos = lafr_py.separated_prototypes_py(6, 10, 0.5, 7)
check(
    "prototypes are unit norm",
    all(abs(math.fsum(x * x for x in row) - 1.0) < 1e-9 for row in protos),
)

domain_a = lafr_py.EmbeddingSet.generate(
    "sensor-a", 6, (8, 8), protos, rotation_seed=1, noise_sigma=0.12,
    contrast_shift=0.4, sample_seed=11,
)
domain_b = lafr_py.EmbeddingSet.generate(
    "sensor-b", 6, (8, 8), protos, rotation_seed=2, noise_sigma=0.12,
    contrast_shift=0.4, sample_seed=12,
)
target = lafr_py.EmbeddingSet.generate(
    "sensor-c", 6, (8, 8), protos, rotation_seed=3, noise_sigma=0.12,
    contrast_shift=0.4, sample_seed=13,
)
check("generated set has expected size", domain_a.n == 48 and domain_a.d == 10)

again = lafr_py.EmbeddingSet.generate(
    "sensor-a", 6, (8, 8), protos, rotation_seed=1, noise_sigma=0.12,
    contrast_shift=0.4, sample_seed=11,
)
check("generation is deterministic", again.vectors() == domain_a.vectors())

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "set.emb"
    domain_a.save(path)
    loaded = lafr_py.EmbeddingSet.load(path)
    check("file round-trip is identity", loaded.vectors() == domain_a.vectors())

# --- graph + confidences ----------------------------------------------------
graph = lafr_py.KnnGraph.build(target.vectors(), 5)
conf = graph.ground_truth_confidence(target.labels())
check("confidences bounded", all(-1.0 <= c <= 1.0 for c in conf))

# --- meta-clustering --------------------------------------------------------
model = lafr_py.train_meta_gcn_py(
    [(domain_a.vectors(), domain_a.labels()), (domain_b.vectors(), domain_b.labels())],
    k=5, input_dim=10, hidden_dims=[16], beta=0.05, max_iter=120, seed=3,
)
predicted = model.forward(graph, target.vectors())
labeling = lafr_py.extract_pseudo_labels_py(graph, predicted, 0.8)
check(
    "pseudo labeling is a partition",
    len(labeling.labels) == target.n and labeling.num_clusters >= 1,
    f"{labeling.num_clusters} clusters",
)

p, r, f_meta = lafr_py.pairwise_f_py(labeling.labels, target.labels())
dist = lafr_py.distance_baseline_py(target.vectors(), 0.3)
_, _, f_dist = lafr_py.pairwise_f_py(dist.labels, target.labels())
check("pairwise F in range", 0.0 <= f_meta <= 1.0 and 0.0 <= f_dist <= 1.0,
      f"meta {f_meta:.3f} vs distance {f_dist:.3f}")

pp, rr, ff = lafr_py.bcubed_f_py([0, 0, 0], [0, 0, 1])
check("bcubed worked example", abs(ff - 10.0 / 14.0) < 1e-12)

# --- recognition ------------------------------------------------------------
theta0 = lafr_py.pretrain_backbone_py(
    domain_a.vectors(), domain_a.labels(), embed_dim=8, hidden_dim=24,
    backbone_seed=5, lr=0.02, epochs=25, seed=6,
)
emb = theta0.embed(target.vectors())
check(
    "embeddings are unit norm",
    all(abs(math.fsum(x * x for x in row) - 1.0) < 1e-9 for row in emb),
)

gt = lafr_py.PseudoLabeling.from_labels(target.labels())
adapted = lafr_py.rct_adapt_py(theta0, target.vectors(), gt, lr=0.02, epochs=10, seed=7)
tuned = lafr_py.finetune_baseline_py(theta0, target.vectors(), gt, lr=0.02, epochs=10, seed=7)
check("adaptation moved the parameters", adapted.params() != theta0.params())
check("finetune differs from rct", adapted.params() != tuned.params())

pairs = lafr_py.sample_verification_pairs_py(target.labels(), 40, 80, 9)
report = lafr_py.evaluate_verification_py(adapted, target.vectors(), pairs, [0.05])
check(
    "verification report sane",
    0.0 <= report["accuracy"] <= 1.0 and len(report["fnmr_at_fmr"]) == 1,
    f"accuracy {report['accuracy']:.3f}",
)

loss, grads = lafr_py.margin_loss_py(
    [[1.0, 0.0], [0.0, 1.0]], [0, 1], [[1.0, 0.0], [0.0, 1.0]], gamma=30.0, margin=0.35
)
check("margin loss finite with gradients", loss >= 0.0 and len(grads) == 2)

# --- federation -------------------------------------------------------------
avg = lafr_py.fedpav_average_py([[1.0, 2.0], [3.0, 4.0]])
check("fedpav average exact", avg == [2.0, 3.0])

server = lafr_py.run_dual_loop_py(
    theta0,
    [(domain_a.vectors(), domain_a.labels()), (domain_b.vectors(), domain_b.labels())],
    rounds=2, epochs=5, lr=0.02, seed=10,
)
check("dual loop returns a server model", len(server.params()) == theta0.num_params())

print()
if failures:
    print(f"{len(failures)} smoke checks failed: {failures}")
    sys.exit(1)
print("all smoke checks passed")
