"""
    Error hierarchy of the numerical laboratory.

    Every error carries the process exit code the experiment commands report
    when it escapes a run: 2 for unusable configuration, 3 for exhausted
    compute budgets, 1 for everything that makes a check fail.
"""
from typing import Any, List, Optional


class DegenerateLabError(Exception):
    exit_code: int = 1


class ConfigError(DegenerateLabError, ValueError):
    exit_code = 2


class GeometryError(DegenerateLabError, ValueError):
    pass


class BudgetExceededError(DegenerateLabError):
    exit_code = 3

    def __init__(self, what: str, requested: float, budget: float):
        self.what = what
        self.requested = requested
        self.budget = budget
        super().__init__(f'{what}: {requested:.0f} exceeds the budget of {budget:.0f}')


class AccuracyError(DegenerateLabError):
    pass


class DegeneratePointError(DegenerateLabError):
    def __init__(self, point: Any):
        self.point = point
        super().__init__(f'Gradient of the regularized distance vanishes numerically at {point}')


class EllipticityError(DegenerateLabError):
    def __init__(self, point: Any, direction: Any, value: float):
        self.point = point
        self.direction = direction
        self.value = value
        super().__init__(f'Non-elliptic sample at X={point}: A xi . xi = {value:.3e} for xi={direction}')


class BiLipschitzError(DegenerateLabError):
    def __init__(self, message: str, worst_pair: Optional[Any] = None):
        self.worst_pair = worst_pair
        super().__init__(message)


class ConvergenceError(DegenerateLabError):
    def __init__(self, message: str, residual_history: Optional[List[float]] = None):
        self.residual_history = residual_history or []
        super().__init__(message)


class ChainError(DegenerateLabError):
    pass


class OracleError(DegenerateLabError):
    pass


class MagicExponentError(DegenerateLabError):
    def __init__(self, n: int, d: float, alpha: float):
        super().__init__(f'Comparability only applies when n = d + 2 + alpha; got n={n}, d={d}, alpha={alpha}')
