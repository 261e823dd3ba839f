ACTIVATIONS: tuple[str, ...] = ("relu", "relu1", "none")

LAYER_KINDS: tuple[str, ...] = ("conv", "affine")

METHODS: tuple[str, ...] = ("faith", "legacy", "oracle", "sampler")

METHOD_TAGS: tuple[str, ...] = ("oracle", "sampler", "dasp", "legacy")

TARGET_KINDS: tuple[str, ...] = ("distance", "logit", "latent")

GRANULARITIES: tuple[str, ...] = ("pixel", "scalar")

NORMALIZATIONS: tuple[str, ...] = ("paper", "per-term")

MOMENT_KINDS: tuple[str, ...] = ("relu", "relu1", "affine", "sq_l2", "min_pool")

MODEL_SCHEMA = "protofaith-model/1"

DEFAULT_LEGACY_EPSILON = 1e-4
DEFAULT_DASP_SAMPLES = 32
DEFAULT_BASELINE = 0.0
DEFAULT_LEGACY_PERCENTILE = 95.0
MAX_EXACT_FEATURES = 20

# Tolerances shared by services and tests.
COMPLETENESS_TOL = 1e-9
ARGMIN_TOL = 1e-12
VARIANCE_CLAMP_TOL = 1e-12
SATURATION_BOUND = 12.0
