"""Validation gates for feature grids, latents and training losses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from flatlat.errors import ContractError, NumericError, TrainingError

logger = logging.getLogger(__name__)

LOSS_LIMIT = 1e6

# Feature-grid rules over (features [N, P, D], labels [N], num_classes)
GRID_RULES: Dict[str, Callable[[np.ndarray, np.ndarray, int], bool]] = {
    "finite_features": lambda f, y, k: bool(np.isfinite(f).all()),
    "rank_3": lambda f, y, k: f.ndim == 3,
    "labels_match": lambda f, y, k: len(y) == len(f),
    "labels_in_range": lambda f, y, k: bool(((y >= 0) & (y < k)).all()) if len(y) else True,
    "non_degenerate": lambda f, y, k: bool(np.ptp(f) > 0) if f.size else True,
}

LATENT_RULES: Dict[str, Callable[[np.ndarray], bool]] = {
    "finite_latents": lambda z: bool(np.isfinite(z).all()),
    "rank_3": lambda z: z.ndim == 3,
    "bounded": lambda z: bool(np.abs(z).max() < 1e4) if z.size else True,
}


@dataclass
class ValidationResult:
    """Result of validation check."""

    passed: bool
    subject: str
    failed_rules: List[str]
    details: Optional[Dict[str, Any]] = None


def _run(rules: Dict[str, Callable[..., bool]], subject: str, *args) -> ValidationResult:
    failed_rules = []
    for rule_name, rule_fn in rules.items():
        try:
            if not rule_fn(*args):
                failed_rules.append(rule_name)
        except Exception as e:
            logger.warning(f"Rule {rule_name} error for {subject}: {e}")
            failed_rules.append(f"{rule_name}_error")
    if failed_rules:
        logger.warning(f"Validation failed for {subject}: {failed_rules}")
    return ValidationResult(passed=not failed_rules, subject=subject, failed_rules=failed_rules)


def validate_grids(subject: str, features: np.ndarray, labels: np.ndarray, num_classes: int) -> ValidationResult:
    if len(features) == 0:
        return ValidationResult(passed=False, subject=subject, failed_rules=["empty_dataset"])
    result = _run(GRID_RULES, subject, np.asarray(features), np.asarray(labels), num_classes)
    result.details = {"count": len(features), "shape": list(np.shape(features)[1:])}
    return result


def validate_latents(subject: str, latents: np.ndarray) -> ValidationResult:
    if len(latents) == 0:
        return ValidationResult(passed=False, subject=subject, failed_rules=["empty_latents"])
    return _run(LATENT_RULES, subject, np.asarray(latents))


def _gate(result: ValidationResult) -> None:
    if result.passed:
        return
    message = f"{result.subject} failed validation: {result.failed_rules}"
    if any(r.startswith("finite") for r in result.failed_rules):
        raise NumericError(message)
    raise ContractError(message)


def check_grids(subject: str, features: np.ndarray, labels: np.ndarray, num_classes: int) -> ValidationResult:
    """Like validate_grids, but raises instead of letting bad data through."""
    result = validate_grids(subject, features, labels, num_classes)
    _gate(result)
    return result


def check_latents(subject: str, latents: np.ndarray) -> ValidationResult:
    result = validate_latents(subject, latents)
    _gate(result)
    return result


def check_loss(value: float, step: int, limit: float = LOSS_LIMIT) -> None:
    """Abort a training loop on a non-finite or exploding loss."""
    if not math.isfinite(value):
        logger.error(f"Non-finite loss {value} at step {step}")
        raise TrainingError(f"loss became {value}", step)
    if abs(value) > limit:
        logger.error(f"Loss {value:.3g} exceeds {limit:.3g} at step {step}")
        raise TrainingError(f"loss {value:.3g} exceeds {limit:.3g}", step)
