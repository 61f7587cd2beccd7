"""
Running a preset matrix on disk
===============================

Each cell gets a cached run directory keyed by its config hash; the matrix
writes one aggregated report plus plots. Same as
``fairgen matrix --preset bias_sweep --seed 0 --seed 1 --plots``.
"""

import tempfile

from fairgen.pipeline import expand_preset, run_matrix

root = tempfile.mkdtemp(prefix="fairgen-demo-")
res = run_matrix(expand_preset("bias_sweep"), [0, 1], root, plots=True)
print(res.report)
print("outputs in", res.path, sorted(p.name for p in res.path.iterdir()))

# %%
# A second call is served from the per-run caches.
again = run_matrix(expand_preset("bias_sweep"), [0, 1], root)
assert again.report == res.report
