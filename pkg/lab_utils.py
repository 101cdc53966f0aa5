"""
Shared plumbing for the slow-fast averaging lab.

Holds the exception types raised by the numerical modules, the atomic
file writers used by the scenario runner, canonical JSON, and the seeded
random generator shared by every ensemble.

Environment:
  SLOWFAST_OUTPUT_DIR   (optional, default: ./lab_output)
  SLOWFAST_JOBS         (optional, default: 1)
  SLOWFAST_SEED         (optional, default: 7)
  SLOWFAST_LHS_SAMPLES  (optional, default: 100000)
  SLOWFAST_QUAD_NODES   (optional, default: 64)
"""
import json
import os
from typing import Any, List, Optional

import numpy as np

# -----------------------
# Config (env)
# -----------------------
OUTPUT_DIR = os.environ.get("SLOWFAST_OUTPUT_DIR", "lab_output")
JOBS = int(os.environ.get("SLOWFAST_JOBS", "1"))
DEFAULT_SEED = int(os.environ.get("SLOWFAST_SEED", "7"))
LHS_SAMPLES = int(os.environ.get("SLOWFAST_LHS_SAMPLES", "100000"))
QUAD_NODES = int(os.environ.get("SLOWFAST_QUAD_NODES", "64"))


# -----------------------
# Errors
# -----------------------
class LabError(Exception):
    """Base class for every failure raised by the lab modules."""


class ConfigValidationError(LabError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} config error(s): " + "; ".join(self.errors))


class IntegrationError(LabError):
    pass


class StepLimitExceeded(IntegrationError):
    def __init__(self, max_steps: int, reached: float):
        self.max_steps = max_steps
        self.reached = reached
        super().__init__(f"step limit {max_steps} exceeded at independent variable {reached:.6g}")


class NonFiniteStateError(IntegrationError):
    def __init__(self, index: int, at: float):
        self.index = index
        self.at = at
        super().__init__(f"non-finite state component {index} at independent variable {at:.6g}")


class OutOfRangeQuery(LabError):
    pass


class FastRateViolation(LabError):
    pass


class NonFiniteValueError(LabError):
    pass


class WindowTooShortError(LabError):
    pass


class ZeroNormError(LabError):
    pass


class EnsembleMemberError(LabError):
    def __init__(self, member: Optional[int], cause: Exception):
        self.member = member
        self.cause = cause
        super().__init__(f"ensemble member {member} failed: {cause}")


class NoStablePointError(LabError):
    pass


class NonMonotoneSweepError(LabError):
    def __init__(self, table):
        self.table = table
        super().__init__("verdicts are not monotone in epsilon; sweep table attached")


class DegenerateCertificateError(LabError):
    pass


class InadmissiblePerturbationError(LabError):
    pass


class DegenerateParameterError(LabError):
    pass


# -----------------------
# Utilities: RNG & JSON
# -----------------------
def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _jsonable(value: Any):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(_jsonable(data), indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n"


# -----------------------
# Utilities: atomic write & file helpers
# -----------------------
def _tighten(path: str):
    try:
        os.chmod(path, 0o600)
    except Exception:
        pass


def atomic_write_text(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
    _tighten(path)


def atomic_write_json(path: str, data: Any):
    atomic_write_text(path, canonical_json(data))


def atomic_write_csv(path: str, df, float_format: Optional[str] = "%.17g"):
    tmp = path + ".tmp"
    df.to_csv(tmp, index=False, float_format=float_format)
    os.replace(tmp, path)
    _tighten(path)


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
