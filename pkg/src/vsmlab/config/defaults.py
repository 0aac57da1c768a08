"""Numerical defaults shared across vsmlab.

Values the source experiments leave unstated are fixed here in one place so
configs, CLI help and tests agree.
"""

# Adam
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Synthetic-experiment architecture: two hidden layers of 30 units
HIDDEN_WIDTHS = (30, 30)
LATENT_DIM = 2

# Linear recovery toy
TOY_GAMMA = 0.5
TOY_ALPHA = 0.6
RECOVER_THETA_GRID = (-2.5, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5)

# Toy posterior traces
TOY_I_X = 2.0
TOY_I_SD = 0.5
TOY_II_X = 1.0
TOY_II_SD = 1.0
TRACE_GRID_EXTENT = 2.0
TRACE_GRID_POINTS = 5
TRACE_STEPS = 5000
TRACE_STEP_SIZE_SGD = 1e-2
TRACE_STEP_SIZE_ADAM = 1e-2
TRACE_INIT_SD = 0.5
TRACE_GRAD_TOL = 1e-5

# GMM fit by biased FD
GMM_COMPONENTS = 10
GMM_STEP_SIZE = 1e-3
GMM_SAMPLES_PER_ITER = 10
GMM_STEPS = 5000
GMM_WEIGHT_FLOOR = 1e-8
GMM_FD_SAMPLES = 20_000

# Evaluation
EVAL_IS_SAMPLES = 100_000
EVAL_Q_SAMPLES = 5
EVAL_FOLDS = 10
IS_CHUNK_ELEMENTS = 200_000
HIST_BINS = 30
HIST_RANGE = (0.0, 1.5)

# Training
TRAIN_BATCH_SIZE = 1000
MAX_UNROLL_STEPS = 50
TRAIN_STEPS = 20_000

# Environment knobs
ENV_THREADS = "VSM_THREADS"
ENV_TORCH_THREADS = "VSM_TORCH_THREADS"
