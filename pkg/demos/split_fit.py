"""Simulate one dataset, fit it whole and in 3 pieces, and compare alpha.

Takes a minute or two on one core.
"""
from consensusjm import ChainConfig, ModelSpec, default_params, simulate_dataset
from consensusjm.consensus import combine
from consensusjm.pipeline import fit_split
from consensusjm.report import summarize

data, truth = simulate_dataset(default_params(), 400, seed=1)
spec = ModelSpec(baseline="weibull", ns_basis=truth.basis)
config = ChainConfig(n_chains=2, n_iter=800, n_warmup=300, seed=2)

full = fit_split(data, spec, config, S=1)
split = fit_split(data, spec, config, S=3)
layout = full.spec.layout()

rows = [("full data", [c.draws for c in full.draws[0]])]
for method in ("union", "equal", "precision"):
    rows.append((method, combine(split.draws, method).chains))

print(f"true alpha {default_params().alpha}")
print(f"{'fit':<10} {'mean':>7} {'2.5%':>7} {'97.5%':>7} {'seconds':>8}")
for label, chains in rows:
    s = summarize(chains, transform=layout)
    j = s.names.index("alpha")
    secs = full.seconds if label == "full data" else split.seconds
    print(f"{label:<10} {s.mean[j]:7.3f} {s.lower[j]:7.3f} {s.upper[j]:7.3f} {secs:8.1f}")
