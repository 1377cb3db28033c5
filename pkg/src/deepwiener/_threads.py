"""Thread-count plumbing; must run before numpy or jax initialize their pools."""
import os

ENV = "DEEPWIENER_THREADS"


def apply_thread_env() -> None:
    n = os.environ.get(ENV, "").strip()
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ValueError(f"{ENV} must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)
    if n == "1":
        flags = os.environ.get("XLA_FLAGS", "")
        if "multi_thread_eigen" not in flags:
            os.environ["XLA_FLAGS"] = (flags + " --xla_cpu_multi_thread_eigen=false"
                                       " intra_op_parallelism_threads=1").strip()
