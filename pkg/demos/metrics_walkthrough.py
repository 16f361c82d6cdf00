"""The four continual-learning summaries on a hand-checkable matrix.

Row i of an accuracy matrix holds the per-task test accuracies measured
right after training stage i. The script prints each summary next to the
arithmetic it abbreviates. Run it directly:

    python demos/metrics_walkthrough.py
"""

import numpy as np

from promptcl.metrics import avg_acc, avg_f, bwt, faa, summarize

MATRIX = np.array([
    [0.901, 0.601, 0.453],
    [0.866, 0.878, 0.636],
    [0.849, 0.772, 0.701],
])


def main():
    a = MATRIX
    t = a.shape[0]
    print("accuracy matrix (rows = after stage i, cols = task j):")
    for row in a:
        print("   ", " ".join(f"{v:.3f}" for v in row))

    print("\navg_acc (seen)    :", f"{avg_acc(a):.4f}")
    print("  mean of per-stage means over tasks seen so far:")
    for i in range(t):
        seen = a[i, : i + 1]
        print(f"    stage {i}: mean({', '.join(f'{v:.3f}' for v in seen)}) "
              f"= {seen.mean():.4f}")

    print("\navg_acc (diagonal):", f"{avg_acc(a, form='diagonal'):.4f}",
          " (just the diagonal mean; a stricter, less common variant)")

    print("\nfaa               :", f"{faa(a):.4f}",
          " (final row mean: where every task ends up)")

    print("\nbwt               :", f"{bwt(a):+.4f}")
    for i in range(t - 1):
        print(f"    task {i}: final {a[-1, i]:.3f} - when learned {a[i, i]:.3f} "
              f"= {a[-1, i] - a[i, i]:+.3f}")

    print("\navg_f             :", f"{avg_f(a):.4f}")
    for i in range(t - 1):
        peak = a[: t - 1, i].max()
        print(f"    task {i}: peak {peak:.3f} - final {a[-1, i]:.3f} "
              f"= {peak - a[-1, i]:.3f}")

    print("\nsummarize() bundles the same four numbers:")
    for k, v in summarize(a).items():
        print(f"    {k:8s} {v:+.4f}")


if __name__ == "__main__":
    main()
