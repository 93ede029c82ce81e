"""Exception hierarchy shared by every stage."""


class WorkfluxError(Exception):
    """Base class; the CLI maps any subclass to exit status 1."""


class FormatError(WorkfluxError):
    """An input file does not follow its documented layout."""


class DataError(WorkfluxError):
    """Input values violate a domain constraint (nonpositive mass, missing pair...)."""


class ContractError(WorkfluxError):
    """A function was called with arguments violating its precondition."""


class FitError(WorkfluxError):
    """The least-squares problem is not solvable as posed."""


class DegenerateFeatureError(DataError):
    def __init__(self, coordinate: str):
        super().__init__(f"degenerate feature: coordinate {coordinate!r} has max == min")
        self.coordinate = coordinate


class ClusteringError(WorkfluxError):
    pass
