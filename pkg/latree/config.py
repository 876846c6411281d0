import logging
import math
import os
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

_config_logger = logging.getLogger(__name__)


def _env_int(name: str, default: int, minimum: int | None = None) -> int:
    raw = os.getenv(name, str(default)).strip()
    try:
        value = int(raw)
    except ValueError:
        raise RuntimeError(f"{name} must be an integer, got {raw!r}") from None
    if minimum is not None and value < minimum:
        raise RuntimeError(f"{name} must be >= {minimum}, got {value}")
    return value


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name, repr(default)).strip()
    try:
        return float(raw)
    except ValueError:
        raise RuntimeError(f"{name} must be a number, got {raw!r}") from None


# ---------------------------------------------------------------------------
# Parallelism / reproducibility
# ---------------------------------------------------------------------------
# Worker cap for the distance, LRG and tensor stages. Output never depends on it.
THREADS: int = _env_int("LATREE_THREADS", 4, minimum=1)
SEED: int = _env_int("LATREE_SEED", 0, minimum=0)

# ---------------------------------------------------------------------------
# Numerical defaults
# ---------------------------------------------------------------------------
SVD_MODE: str = os.getenv("LATREE_SVD_MODE", "exact").strip().lower()
if SVD_MODE not in ("exact", "randomized"):
    raise RuntimeError(f"LATREE_SVD_MODE must be 'exact' or 'randomized', got {SVD_MODE!r}")
ALPHA: float = _env_float("LATREE_ALPHA", 3.0)
RESTARTS: int = _env_int("LATREE_RESTARTS", 50, minimum=1)
ITERS: int = _env_int("LATREE_ITERS", 100, minimum=1)
TOL: float = _env_float("LATREE_TOL", 1e-8)
# Samples per block when streaming third moments.
CHUNK: int = _env_int("LATREE_CHUNK", 4096, minimum=1)

# Below this, sigma_k of a cross moment counts as zero and the distance is +inf.
SINGULAR_FLOOR: float = 1e-12
# Smallest singular value any generated transition may have.
CONDITIONING_FLOOR: float = 0.1
# Negative distances above this are noise and get clamped to 0.
CLAMP_TOLERANCE: float = 1e-9
# Prior components down to -PRIOR_CLAMP are clamped; anything lower is an error.
PRIOR_CLAMP: float = 1e-6
# Auto epsilon = EPSILON_SCALE * smallest pairwise distance inside the group,
# unless distance standard errors are known (see RunConfig.epsilon_for).
EPSILON_SCALE: float = 0.2
# Tests on sampled distances allow NOISE_Z standard errors per witness.
NOISE_Z: float = _env_float("LATREE_NOISE_Z", 3.0)
# Contiguous sample blocks for the jackknife standard errors of distances.
JACKKNIFE_BLOCKS: int = _env_int("LATREE_JACKKNIFE_BLOCKS", 10, minimum=2)
# Auto epsilon is doubled at most this many times when a round makes no progress.
EPSILON_RETRIES: int = 6
EPSILON_FLOOR: float = 1e-6
# A projected permutation further than this (max-abs) is low confidence.
PERMUTATION_CONFIDENCE: float = 0.3
# Duplicate edge estimates differing by more than this trigger a warning.
DUPLICATE_TOLERANCE: float = 1e-6

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
LOG_LEVEL: str = os.getenv("LOG_LEVEL", "WARNING").strip().upper()
# "text" (human-readable) or "json" (one-line JSON per record).
LOG_FORMAT: str = os.getenv("LOG_FORMAT", "text").strip().lower()
if LOG_FORMAT not in ("text", "json"):
    _config_logger.warning(f"Unknown LOG_FORMAT {LOG_FORMAT!r}, falling back to text")
    LOG_FORMAT = "text"
# Empty disables the rotating file handler; the CLI is usually run without one.
LOG_DIR: str = os.getenv("LOG_DIR", "").strip()
LOG_MAX_BYTES: int = _env_int("LOG_MAX_BYTES", 5 * 1024 * 1024)  # 5 MB default
LOG_BACKUP_COUNT: int = _env_int("LOG_BACKUP_COUNT", 3)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------
class RunConfig(BaseModel):
    """Everything that influences a learning run.

    Serialized into the metadata block of every output so a result can be
    reproduced from the file alone.
    """

    model_config = ConfigDict(extra="forbid")

    k: int = Field(2, ge=1)
    svd_mode: Literal["exact", "randomized"] = SVD_MODE  # type: ignore[assignment]
    alpha: float = Field(ALPHA, ge=2.0, le=3.0)
    epsilon: float | Literal["auto"] = "auto"
    restarts: int = Field(RESTARTS, ge=1)
    iters: int = Field(ITERS, ge=1)
    tol: float = Field(TOL, gt=0.0)
    threads: int = Field(THREADS, ge=1)
    seed: int = Field(SEED, ge=0)
    family: Literal["discrete", "gaussian"] = "discrete"
    noise: float = Field(0.5, gt=0.0)
    noise_z: float = Field(NOISE_Z, ge=0.0)
    jackknife_blocks: int = Field(JACKKNIFE_BLOCKS, ge=2)
    hidden_moments: Literal["analytic", "posterior"] = "analytic"
    mst_algorithm: Literal["prim", "boruvka"] = "prim"
    merge_parallel: bool = False
    samples_path: str | None = None
    group_map_path: str | None = None
    out_dir: str | None = None

    @field_validator("epsilon", mode="before")
    @classmethod
    def _parse_epsilon(cls, value: object) -> object:
        if isinstance(value, str):
            text = value.strip().lower()
            if text == "auto":
                return "auto"
            try:
                value = float(text)
            except ValueError:
                raise ValueError(
                    f"epsilon must be a positive number or 'auto', got {value!r}"
                ) from None
        if isinstance(value, (int, float)) and value <= 0:
            raise ValueError("epsilon must be positive")
        return value

    def epsilon_for(self, group_min_distance: float, noise: float | None = None) -> float:
        """Resolve ``epsilon`` for one group.

        Auto mode scales with the group's smallest distance. When ``noise``
        (a typical distance standard error in the group) is known, it is
        used instead as long as it stays below that scale; per-witness
        slack then comes from the standard errors themselves.
        """
        if self.epsilon != "auto":
            return float(self.epsilon)
        scaled = EPSILON_SCALE * group_min_distance
        if noise is None or not math.isfinite(noise):
            return scaled
        return min(scaled, max(noise, EPSILON_FLOOR))
