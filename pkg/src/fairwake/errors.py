"""Exception hierarchy. CLI maps ConfigError -> exit 1, DataError -> exit 2."""


class FairwakeError(Exception):
    pass


class ConfigError(FairwakeError, ValueError):
    pass


class DataError(FairwakeError):
    pass


class LengthError(DataError, ValueError):
    pass


class DimensionError(FairwakeError, ValueError):
    pass


class ContractError(FairwakeError, RuntimeError):
    """Raised when an object is used outside the state it was produced for."""


class InsufficientGroupsError(FairwakeError, ValueError):
    pass


class DomainError(FairwakeError, ValueError):
    pass
