"""Combine three known normal subposteriors and compare with the exact product."""
import numpy as np

from consensusjm.consensus import combine, gaussian_product_oracle

rng = np.random.default_rng(0)
mu, tau = np.array([-0.8, 0.3, 1.5]), np.array([2.0, 0.5, 5.0])
D = 50_000
draws = (mu[:, None] + rng.standard_normal((3, D)) / np.sqrt(tau)[:, None])[:, None, :, None]

m, v = gaussian_product_oracle(mu, tau)
print(f"{'method':<10} {'mean':>8} {'var':>8}")
print(f"{'exact':<10} {m:8.4f} {v:8.4f}")
for method in ("union", "equal", "precision"):
    x = combine(draws, method).chains[0][:, 0]
    print(f"{method:<10} {x.mean():8.4f} {x.var(ddof=1):8.4f}")
