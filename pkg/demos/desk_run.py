"""End-to-end miniature run: pretrain, three stages, metrics.

Everything is scaled down (16px images, a 2-block encoder, a few epochs) so
the whole thing finishes in well under a minute on a laptop CPU while still
exercising the real pipeline: frozen backbone, staged prompt expansion, the
similarity loss, and the forgetting report. Run it directly:

    python demos/desk_run.py [run_dir]

The CLI runs the same pipeline at full scale from a JSON config; see the
README for `promptcl train`.
"""

import sys
from pathlib import Path

import numpy as np

from promptcl.harness import DataConfig, PretrainConfig, RunConfig, run_experiment
from promptcl.optim import OptimSettings
from promptcl.vit import ViTConfig


def tiny_config() -> RunConfig:
    return RunConfig(
        seed=0,
        pool_size=8,
        expansion_ratio=0.5,
        epochs=12,
        patience=4,
        batch_size=32,
        optim=OptimSettings(lr=1e-3, warmup_epochs=1),
        pretrain=PretrainConfig(epochs=25, patience=6, accuracy_floor=0.4,
                                n_train=768, n_val=128, batch_size=32),
        data=DataConfig(num_domains=3, n_per_domain=300, image_size=16),
        vit=ViTConfig(image_size=16, patch_size=4, channels=3, dim=32,
                      depth=3, heads=2, mlp_ratio=2.0, num_classes=3,
                      prompt_layers=(0, 1, 2)),
    )


def main():
    run_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_run"
    print("pretraining the backbone and running 3 stages (~15s)...\n")
    result = run_experiment(tiny_config(), run_dir=run_dir)

    acc = np.asarray(result["accuracy_matrix"])
    print("accuracy matrix (row = after stage, col = task):")
    for row in acc:
        print("   ", " ".join(f"{v:.3f}" for v in row))

    print("\nforgetting report:")
    for k, v in result["metrics"].items():
        print(f"    {k:8s} {v:+.4f}")

    print("\nstage similarity (expanded prompt groups):")
    for row in result["stage_similarity"]:
        print("   ", " ".join(f"{v:.3f}" for v in row))

    print(f"\nartifacts in {run_dir}/:")
    for p in sorted(Path(run_dir).iterdir()):
        print("   ", p.name)


if __name__ == "__main__":
    main()
