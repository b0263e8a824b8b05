class WmlabError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameter(WmlabError, ValueError):
    pass


class InvalidInput(WmlabError, ValueError):
    pass


class CorpusTooSmall(WmlabError, ValueError):
    pass


class InsufficientText(WmlabError, ValueError):
    pass


class InsufficientPrompts(WmlabError, ValueError):
    pass


class InvalidDataset(WmlabError, ValueError):
    pass


class UndefinedBaseline(WmlabError, ZeroDivisionError):
    pass


class ConfigError(WmlabError, ValueError):
    pass
