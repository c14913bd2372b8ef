# Cap BLAS threads before numpy is imported anywhere so test runs are
# reproducible and single-threaded timings are meaningful.
import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
