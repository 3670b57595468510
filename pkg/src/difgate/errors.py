"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the CLI echoes
next to the human-readable message.
"""


class DifgateError(Exception):
    code = "error"


class ValidationError(DifgateError, ValueError):
    code = "invalid"


class TooFewNodes(ValidationError):
    code = "too_few_nodes"


class EmptyData(ValidationError):
    code = "empty_data"


class SchemaError(ValidationError):
    code = "schema"


class EmptyFile(SchemaError):
    code = "empty_file"


class ConfigError(ValidationError):
    code = "config"


class TooFewItems(ValidationError):
    code = "too_few_items"


class GroupMissing(ValidationError):
    code = "group_missing"


class EstimationError(DifgateError):
    code = "estimation"

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group

    def tagged(self, group):
        """Return a copy of this error labelled with the group it came from."""
        err = type(self).__new__(type(self))
        err.__dict__.update(self.__dict__)
        err.args = (f"group {group}: {self.args[0]}",)
        err.group = group
        return err


class NonConvergence(EstimationError):
    code = "non_convergence"


class SingularInformation(EstimationError):
    code = "singular_information"


class NonPositiveSlope(EstimationError):
    """Raised when a fitted slope is not positive; ``items`` lists the offenders."""

    code = "non_positive_slope"

    def __init__(self, message, items=(), group=None):
        super().__init__(message, group=group)
        self.items = tuple(items)


class ScalingError(DifgateError):
    code = "scaling"


class NoConvergence(ScalingError):
    code = "robust_no_convergence"


class AllDownweighted(ScalingError):
    code = "all_downweighted"


class TooManyFailures(DifgateError):
    code = "too_many_failures"
