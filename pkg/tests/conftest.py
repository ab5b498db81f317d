import os

# pin BLAS threading before numpy loads anywhere: bit-reproducibility of the
# training runs is asserted by the acceptance suite
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
