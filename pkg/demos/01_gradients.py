"""Build a small loss by hand, differentiate it, and compare against
central differences. Then run the full oracle suite that the CLI exposes."""
import numpy as np

from handadapt import autodiff as ad
from handadapt.gradcheck import run_suite

rng = np.random.default_rng(0)
params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(5, 2))}
x = rng.normal(size=(5, 3))


def loss(p):
    # elementwise ops take equal shapes only, so the bias is a full (5, 2) block
    h = ad.add(ad.matmul(ad.as_tensor(x), p["w"]), p["b"])
    return ad.mean(ad.square(ad.sigmoid(h)))


value, grads = ad.grad(loss, params)
print(f"loss {value:.6f}")
for k, g in grads.items():
    print(k, "analytic", np.round(g.ravel()[:3], 6))

res = ad.check_gradients(loss, params, name="toy")
print(f"toy check: max relative error {res.max_rel_error:.2e} over {res.n_checked} entries")

# one Adam step on a scalar: the bias-corrected first step moves by lr
p, state = ad.adam_step({"w": np.array(1.0)}, {"w": np.array(1.0)}, ad.AdamState(), lr=0.1)
print("adam first step 1.0 ->", float(p["w"]))

report = run_suite()
print(f"suite: {len(report.results)} cases, worst {report.worst:.2e}, "
      f"{'passed' if report.passed else 'FAILED'} in {report.seconds:.1f}s")
