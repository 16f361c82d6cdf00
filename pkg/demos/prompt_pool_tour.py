"""Walk through the prompt pool: readouts, staged expansion, similarity.

Shows the two readout modes, what freezing means at expansion time, the
stage-similarity matrix, and why the literal-softmax variant of the
similarity loss cannot train anything. Run it directly:

    python demos/prompt_pool_tour.py
"""

import numpy as np

import promptcl.tensor as T
from promptcl.losses import loss_similarity
from promptcl.pool import PromptPool, refined_select, refined_weights
from promptcl.tensor import Tensor


def readouts():
    pool = PromptPool(6, 8, expansion_ratio=0.5, seed=3)
    query = Tensor(np.random.default_rng(1).normal(size=(2, 8)))

    phi = pool.select(query)
    print("cosine readout   :", phi.shape, "(one blended value row per query)")

    w = refined_weights(query, pool.keys())
    print("softmax weights  :", w.shape, "columns sum to",
          np.round(w.numpy().sum(axis=0), 6))
    print("softmax readout  :", refined_select(w, pool).shape)


def expansion_freezes_the_past():
    pool = PromptPool(6, 8, expansion_ratio=0.5, seed=3)
    print("stage groups     :", [(g.stage_id, g.size, g.frozen) for g in pool.groups])

    before = pool.groups[0].values.numpy().copy()
    pool.expand(1)
    pool.expand(2)
    print("after expanding  :", [(g.stage_id, g.size, g.frozen) for g in pool.groups])
    print("base unchanged   :", np.array_equal(before, pool.groups[0].values.numpy()))
    print("trainable tensors:", len(pool.trainable()), "(keys+values of the live group)")

    sim = pool.stage_similarity()
    print("stage similarity :")
    for row in sim:
        print("   ", " ".join(f"{v:.3f}" for v in row))


def softmax_degeneracy():
    rng = np.random.default_rng(7)
    p = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(6, 8)), requires_grad=True)

    with T.Tape():
        literal = loss_similarity(p, k, mode="literal_softmax")
        T.backward(literal)
    g_literal = np.sqrt(np.sum(p.grad ** 2) + np.sum(k.grad ** 2))

    p2 = Tensor(p.numpy(), requires_grad=True)
    k2 = Tensor(k.numpy(), requires_grad=True)
    with T.Tape():
        raw = loss_similarity(p2, k2, mode="raw_cosine")
        T.backward(raw)
    g_raw = np.sqrt(np.sum(p2.grad ** 2) + np.sum(k2.grad ** 2))

    m = k.shape[0]
    print(f"literal value    : {literal.item():.12f}  (always (M-1)/M = {(m - 1) / m:.12f})")
    print(f"literal grad norm: {g_literal:.2e}  (zero: softmax rows always sum to 1)")
    print(f"raw value        : {raw.item():.6f}")
    print(f"raw grad norm    : {g_raw:.2e}  (this one can actually pull prompts around)")


def main():
    print("-- readout modes -----------------------------------------")
    readouts()
    print("\n-- staged expansion ---------------------------------------")
    expansion_freezes_the_past()
    print("\n-- similarity loss modes ----------------------------------")
    softmax_degeneracy()


if __name__ == "__main__":
    main()
