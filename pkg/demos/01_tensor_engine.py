"""Tour of the tensor engine: taped ops, backward, and the FD oracle.

Run:  python demos/01_tensor_engine.py
"""

import numpy as np

from motionkit import autodiff as ad
from motionkit.autodiff import Tensor, backward, finite_diff_check

print("== build a small graph ==")
x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
w = Tensor(np.array([[0.2, -0.1], [0.7, 0.4]]), requires_grad=True)
y = ad.tsum(ad.relu(ad.matmul(w, x)))
print(f"value: {y.item():.4f}, tape length: {len(ad.active_tape())}")

leaves = backward(y)
print(f"gradients reached {len(leaves)} leaves; tape cleared -> {len(ad.active_tape())}")
print("dL/dw =\n", w.grad)

print("\n== the finite-difference oracle ==")
rng = np.random.default_rng(0)
target = Tensor(rng.normal(size=(4,)))


def objective(v):
    p = ad.softmax(v, axis=0)
    return ad.tsum(ad.mul(ad.sub(p, target), ad.sub(p, target)))


report = finite_diff_check(objective, Tensor(rng.normal(size=4)), h=1e-4, tol=1e-4)
print(f"softmax objective: max relative error {report.max_rel_err:.2e} "
      f"over {report.n_checked} coordinates -> {'pass' if report.passed else 'FAIL'}")

print("\n== gradients accumulate across shared uses ==")
p = Tensor(np.array([2.0]), requires_grad=True)
loss = ad.add(ad.mul(p, p), ad.scale(p, 3.0))  # p^2 + 3p
backward(loss)
print(f"d/dp (p^2 + 3p) at p=2: {p.grad[0]:.1f} (expected 7.0)")
