"""Exception types shared across the package."""

from __future__ import annotations


class CoevolveError(Exception):
    """Base class for all package errors."""


class FormatError(CoevolveError):
    """Question text is not exactly one ``<question>...</question>`` block."""


class GrammarError(CoevolveError):
    """Tags are fine but the body does not parse under the scene grammar."""


class SpecError(CoevolveError):
    """Invalid scene generation parameters."""


class DomainError(CoevolveError, ValueError):
    """Argument outside the mathematical domain of a reward function."""


class EmptyAnswers(CoevolveError, ValueError):
    """Majority vote requested over zero answers."""


class NonFiniteLogits(CoevolveError, FloatingPointError):
    """A forward pass produced a non-finite logit."""


class NonFiniteGradient(CoevolveError, FloatingPointError):
    """A backward pass produced a non-finite gradient entry."""


class NonFiniteLoss(CoevolveError, FloatingPointError):
    """The GRPO loss evaluated to a non-finite value."""


class ConfigError(CoevolveError, ValueError):
    """Run configuration failed validation.

    ``problems`` lists one message per violated field.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class VersionMismatch(CoevolveError):
    """A persisted artifact has an unsupported format version."""
