"""Two-player arena games, recurrent self-play policies, and
action-sequence trojan experiments.

Results are meant to be bit-reproducible from a seed, so the package pins
BLAS to a single thread before numpy is first imported (multi-threaded
reductions are not deterministic). Import this package before numpy in
entry points that care about exact reruns.
"""
import os as _os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
