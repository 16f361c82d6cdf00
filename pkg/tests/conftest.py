from __future__ import annotations

import numpy as np
import pytest

import promptcl.tensor as T
from promptcl.tensor import Tensor


def rng_for(name: str, trial: int) -> np.random.Generator:
    return np.random.default_rng(abs(hash((name, trial))) % (2**32))


def fd_gradcheck(fn, arrays, *, eps=1e-3, tol=1e-4, trial_tag="fd"):
    """Central-finite-difference check of fn's gradient w.r.t. every input.

    ``fn`` maps a tuple of Tensors to a scalar Tensor. Inputs are float64 so
    the difference quotient is accurate at eps=1e-3. Returns the worst
    relative error seen so failures can report it.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with T.Tape():
        out = fn(*tensors)
        T.backward(out)
    worst = 0.0
    for t, base in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = np.asarray(base, dtype=np.float64).copy()
        fd = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            for sign, store in ((+1, 0), (-1, 1)):
                bumped = flat.reshape(-1).copy()
                bumped[i] += sign * eps
                args = []
                for s, other in zip(tensors, arrays):
                    if s is t:
                        args.append(Tensor(bumped.reshape(t.data.shape)))
                    else:
                        args.append(Tensor(np.asarray(other, dtype=np.float64)))
                val = fn(*args).item()
                if store == 0:
                    plus = val
                else:
                    fd[i] = (plus - val) / (2.0 * eps)
        fd = fd.reshape(t.data.shape)
        scale = max(float(np.max(np.abs(fd))), float(np.max(np.abs(analytic))), 1e-4)
        err = float(np.max(np.abs(analytic - fd))) / scale
        worst = max(worst, err)
        assert err <= tol, f"{trial_tag}: relative error {err:.2e} exceeds {tol}"
    return worst


@pytest.fixture(scope="session")
def tiny_vit_config():
    from promptcl.vit import ViTConfig

    return ViTConfig(image_size=16, patch_size=8, channels=3, dim=16, depth=2,
                     heads=2, mlp_ratio=2.0, num_classes=3, prompt_layers=(0, 1))
