from typing import Optional


class PQError(Exception):
    pass


class ContractViolation(PQError, ValueError):
    pass


class ConfigError(PQError, ValueError):
    pass


class DataIOError(PQError, OSError):
    pass


class NumericalFailure(PQError, ArithmeticError):
    def __init__(self, message: str, session: Optional[int] = None, epoch: Optional[int] = None,
                 episode: Optional[int] = None, loss: Optional[float] = None):
        super().__init__(message)
        self.session = session
        self.epoch = epoch
        self.episode = episode
        self.loss = loss
