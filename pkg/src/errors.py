"""
Exception hierarchy shared by the planner, the simulator and the CLI
"""


class PlannerError(Exception):
    """Base class for every error raised by this package"""


class DomainError(PlannerError, ValueError):
    """An argument lies outside the domain of a function (e.g. arclength beyond the path)"""


class ContractError(PlannerError):
    """A pre- or postcondition of an operation does not hold"""


class ConfigurationError(PlannerError):
    """
    Invalid experiment configuration or scenario fixture

    Args:
        field (str): Dotted path of the offending field, e.g. ``postponing.branching_threshold``
        message (str): Human readable reason
    """

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)
