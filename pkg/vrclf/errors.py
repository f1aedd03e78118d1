from typing import Any, Dict, Optional, Sequence


class VRCLFError(Exception):
    """Base class for every error raised by the toolkit"""

    def to_dict(self) -> Dict:
        return {"type": type(self).__name__, "message": str(self)}


class DomainError(VRCLFError, ValueError):
    """Argument outside the domain of a function"""


class ConvergenceError(VRCLFError):
    """Bracketing, bisection or Newton iteration did not converge"""


class CycleCapError(VRCLFError):
    """Gain matrix too large for simple-cycle enumeration"""


class NonFiniteError(VRCLFError, ValueError):
    """A NaN or infinity showed up where a finite value is required"""


class SchemaError(VRCLFError):
    """Malformed JSON document"""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column

    def to_dict(self) -> Dict:
        result = super().to_dict()
        result.update({"line": self.line, "column": self.column})
        return result


class HypothesisError(VRCLFError):
    """A modelling hypothesis or parameter restriction fails"""

    def __init__(self, message: str, witness: Any = None):
        super().__init__(message)
        self.witness = witness


class SamplerExhaustedError(VRCLFError):
    """Rejection sampler could not produce enough points"""


class IntegrationError(VRCLFError):
    """Step-size underflow or non-finite state during integration"""

    def __init__(self, message: str, t: float, state: Sequence[float]):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t
        self.state = list(state)

    def to_dict(self) -> Dict:
        result = super().to_dict()
        result.update({"t": self.t, "state": self.state})
        return result


class InfeasibleError(VRCLFError):
    """
    No admissible control value satisfies the constraint system.

    `implication` is one of "I", "II", "III", "IV"; `witness` holds the
    offending constraint index (or pair of indices).
    """

    def __init__(self, implication: str, witness: Sequence[int], detail: str = "",
                 region: Optional[str] = None, state: Optional[Sequence[float]] = None):
        message = f"implication {implication} fails for constraints {list(witness)}"
        if detail:
            message = f"{message}: {detail}"
        if region:
            message = f"{message} [region {region}]"
        super().__init__(message)
        self.implication = implication
        self.witness = list(witness)
        self.detail = detail
        self.region = region
        self.state = None if state is None else [float(v) for v in state]

    def at(self, region: str, state: Sequence[float]) -> "InfeasibleError":
        """Copy of this error tagged with the synthesis region and state"""
        return InfeasibleError(self.implication, self.witness, self.detail, region, state)

    def to_dict(self) -> Dict:
        result = super().to_dict()
        result.update({
            "implication": self.implication,
            "witness": self.witness,
            "region": self.region,
            "state": self.state,
        })
        return result
