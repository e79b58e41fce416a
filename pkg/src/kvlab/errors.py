"""Error taxonomy shared across kvlab modules."""


class KvlabError(ValueError):
    """Base class for all kvlab errors."""


class ConfigurationError(KvlabError):
    """Bad static configuration: shapes, budgets, grids, config files."""


class ContractError(KvlabError):
    """A call violated a documented precondition (positions, cache state, ...)."""


class InvalidMaskError(KvlabError):
    """An attention mask left a query row with no visible key."""


class IntegrityError(KvlabError):
    """An event stream is internally inconsistent (double evict, unknown id, ...)."""


class TrainingDiverged(KvlabError):
    """A training loss became non-finite; the run is aborted with diagnostics."""
