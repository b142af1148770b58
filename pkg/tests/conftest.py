"""Pin BLAS pools to one thread before numpy loads anywhere in the run.

Several checks compare float32 training runs byte-for-byte and against
frozen suite numbers; thread-count-dependent summation order would make
them flap. Must run before the first numpy import, which is why it lives
here and not in a fixture.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
