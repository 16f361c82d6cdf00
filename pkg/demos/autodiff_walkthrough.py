"""Tour of the tape-based autodiff engine behind everything else.

Builds a few small expressions, runs reverse-mode backward, and checks one
gradient against a central finite difference. Run it directly:

    python demos/autodiff_walkthrough.py
"""

import numpy as np

import promptcl.tensor as T
from promptcl.tensor import Tensor


def scalar_chain():
    # d/dx of sum((2x + 3)^2 ... via mul) at x = [1, 2, 3]
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with T.Tape():
        y = T.add(T.scale(x, 2.0), Tensor(np.array([3.0, 3.0, 3.0])))
        loss = T.tensor_sum(T.mul(y, y))
        T.backward(loss)
    print("loss          :", loss.item())
    print("grad          :", x.grad)          # 4 * (2x + 3)
    print("expected      :", 4 * (2 * x.numpy() + 3))


def gradients_stop_at_untracked_inputs():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    frozen = Tensor(np.eye(2))               # no requires_grad: treated as data
    with T.Tape():
        out = T.matmul(frozen, w)
        T.backward(T.tensor_sum(out))
    print("w.grad        :", None if w.grad is None else w.grad.tolist())
    print("frozen.grad   :", frozen.grad)    # stays None


def finite_difference_check():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))

    def loss_value(a_arr):
        # ops run fine outside a tape; nothing is recorded
        return T.tensor_sum(T.gelu(T.matmul(Tensor(a_arr), Tensor(b)))).item()

    at = Tensor(a, requires_grad=True)
    with T.Tape():
        T.backward(T.tensor_sum(T.gelu(T.matmul(at, Tensor(b)))))

    eps = 1e-5
    i, j = 1, 2
    bumped = a.copy()
    bumped[i, j] += eps
    up = loss_value(bumped)
    bumped[i, j] -= 2 * eps
    down = loss_value(bumped)
    fd = (up - down) / (2 * eps)
    print(f"analytic      : {at.grad[i, j]:.10f}")
    print(f"finite diff   : {fd:.10f}")
    print(f"abs gap       : {abs(at.grad[i, j] - fd):.2e}")


def main():
    print("-- scalar chain ------------------------------------------")
    scalar_chain()
    print("\n-- untracked inputs --------------------------------------")
    gradients_stop_at_untracked_inputs()
    print("\n-- finite-difference spot check ---------------------------")
    finite_difference_check()


if __name__ == "__main__":
    main()
