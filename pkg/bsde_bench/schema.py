"""Run configuration schema, pydantic models and result rows."""

import json
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import jsonschema
from jsonschema.exceptions import best_match
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .problems import BUILTIN_NAMES
from .utils import format_float, get_logger, sha256_text

logger = get_logger(__name__)

RESULT_COLUMNS = [
    'scheme', 'problem', 'n', 'mesh',
    'err_Y_max_p', 'err_Y_stderr',
    'err_Z_int_L2', 'err_Z_stderr',
    'err_max_joint_p', 'picard_max_iters', 'wall_ms',
]


class ConfigError(ValueError):
    """Invalid run configuration; the message names the field and its line."""


class ProblemConfig(BaseModel):
    name: str
    params: Dict[str, Any] = Field(default_factory=dict)


class PicardModel(BaseModel):
    tol: float = 1e-10
    max_iter: int = 50

    @field_validator('tol')
    @classmethod
    def validate_tol(cls, v):
        if not v > 0:
            raise ValueError("tol must be positive")
        return v

    @field_validator('max_iter')
    @classmethod
    def validate_max_iter(cls, v):
        if v < 1:
            raise ValueError("max_iter must be >= 1")
        return v


class SchemeConfig(BaseModel):
    kind: Literal['explicit', 'implicit', 'malliavin']
    picard: PicardModel = Field(default_factory=PicardModel)
    weight_variant: Literal['integral', 'left_point'] = 'integral'
    l1_bound: Optional[float] = None


class EstimatorParams(BaseModel):
    degree: int = 4
    ridge: float = 1e-10
    basis: Literal['monomial', 'hermite'] = 'monomial'
    inner: int = 64

    @field_validator('degree', 'inner')
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator('ridge')
    @classmethod
    def validate_ridge(cls, v):
        if v < 0:
            raise ValueError("ridge must be >= 0")
        return v


class EstimatorConfig(BaseModel):
    kind: Literal['exact', 'lsmc', 'nested'] = 'exact'
    params: EstimatorParams = Field(default_factory=EstimatorParams)

    @model_validator(mode='before')
    @classmethod
    def ensure_params(cls, data):
        if isinstance(data, dict) and data.get('params') is None:
            data = {**data, 'params': {}}
        return data


class RunConfig(BaseModel):
    """Resolved run configuration; every default is materialized."""
    problem: ProblemConfig
    scheme: SchemeConfig
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    ladder: List[int]
    fine_n: int
    n_paths: int
    seed: int
    p: float = 2.0
    T: float = 1.0
    out: str = 'results'

    @model_validator(mode='after')
    def check_ladder(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.p < 2:
            raise ValueError("p must be >= 2")
        if not self.T > 0:
            raise ValueError("T must be positive")
        bad = [n for n in self.ladder if n < 1 or self.fine_n % n != 0]
        if bad:
            raise ValueError(f"ladder values {bad} do not divide fine_n={self.fine_n}")
        return self


class ResultRow(BaseModel):
    scheme: str
    problem: str
    n: int
    mesh: float
    # None on the level that serves as its own grid reference
    err_Y_max_p: Optional[float] = None
    err_Y_stderr: Optional[float] = None
    err_Z_int_L2: Optional[float] = None
    err_Z_stderr: Optional[float] = None
    err_max_joint_p: Optional[float] = None
    picard_max_iters: Optional[int] = None
    wall_ms: Optional[float] = None

    def csv_values(self) -> List[str]:
        values = []
        for column in RESULT_COLUMNS:
            value = getattr(self, column)
            if value is None:
                values.append('')
            elif isinstance(value, float):
                values.append(format_float(value))
            else:
                values.append(str(value))
        return values


def get_config_json_schema() -> Dict[str, Any]:
    """JSON schema of the run configuration document."""
    number = {"type": "number"}
    return {
        "type": "object",
        "required": ["problem", "scheme", "ladder", "fine_n", "n_paths", "seed"],
        "additionalProperties": False,
        "properties": {
            "problem": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "enum": list(BUILTIN_NAMES)},
                    "params": {"type": "object"}
                }
            },
            "scheme": {
                "type": "object",
                "required": ["kind"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"type": "string", "enum": ["explicit", "implicit", "malliavin"]},
                    "picard": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            "tol": {"type": "number", "exclusiveMinimum": 0},
                            "max_iter": {"type": "integer", "minimum": 1}
                        }
                    },
                    "weight_variant": {"type": "string", "enum": ["integral", "left_point"]},
                    "l1_bound": {"type": ["number", "null"]}
                }
            },
            "estimator": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "kind": {"type": "string", "enum": ["exact", "lsmc", "nested"]},
                    "params": {
                        "type": ["object", "null"],
                        "additionalProperties": False,
                        "properties": {
                            "degree": {"type": "integer", "minimum": 0},
                            "ridge": {"type": "number", "minimum": 0},
                            "basis": {"type": "string", "enum": ["monomial", "hermite"]},
                            "inner": {"type": "integer", "minimum": 1}
                        }
                    }
                }
            },
            "ladder": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
            "fine_n": {"type": "integer", "minimum": 1},
            "n_paths": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
            "p": {**number, "minimum": 2},
            "T": {**number, "exclusiveMinimum": 0},
            "out": {"type": "string"}
        }
    }


def locate_line(text: Optional[str], path: Sequence[Any]) -> Optional[int]:
    """Best-effort line of the innermost named key of a field path in the JSON text."""
    if not text:
        return None
    position = 0
    found = None
    for key in path:
        if not isinstance(key, str):
            continue
        match = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, position)
        if match is None:
            break
        position = match.start()
        found = position
    if found is None:
        return None
    return text.count('\n', 0, found) + 1


def _describe(path: Sequence[Any], message: str, text: Optional[str]) -> str:
    field_name = '.'.join(str(k) for k in path) or '<root>'
    line = locate_line(text, path)
    where = f" (line {line})" if line else ''
    return f"{field_name}{where}: {message}"


def validate_and_normalize(raw: Any, text: Optional[str] = None) -> Tuple[bool, Optional[RunConfig], Optional[str]]:
    """
    Validate a configuration document.

    Returns:
        (is_valid, resolved_config, error_message)
    """
    validator = jsonschema.Draft7Validator(get_config_json_schema())
    error = best_match(validator.iter_errors(raw))
    if error is not None:
        return False, None, _describe(list(error.absolute_path), error.message, text)
    try:
        return True, RunConfig.model_validate(raw), None
    except ValidationError as e:
        first = e.errors()[0]
        path = [k for k in first['loc'] if k != '__root__']
        if not path and 'ladder' in first['msg']:
            path = ['ladder']
        return False, None, _describe(path, first['msg'], text)


def load_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read, override and validate a configuration file; raises ConfigError."""
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} (line {e.lineno}): invalid JSON: {e.msg}") from e
    if isinstance(raw, dict):
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    ok, config, error = validate_and_normalize(raw, text)
    if not ok:
        raise ConfigError(f"{path}: {error}")
    return config


def resolved_document(config: RunConfig) -> Dict[str, Any]:
    """Resolved configuration with a sha256 fingerprint of its canonical JSON."""
    resolved = config.model_dump(mode='json')
    canonical = json.dumps(resolved, sort_keys=True, separators=(',', ':'))
    return {'config': resolved, 'fingerprint': sha256_text(canonical)}
