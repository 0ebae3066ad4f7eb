"""Exception hierarchy shared by every ganinvert module."""


class GanInvertError(Exception):
    pass


class ConfigurationError(GanInvertError, ValueError):
    pass


class ShapeError(GanInvertError, ValueError):
    pass


class NumericalError(GanInvertError, ArithmeticError):
    """Raised on NaN/Inf. ``iteration`` carries the loop index when known."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingError(GanInvertError, RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class PersistenceError(GanInvertError, IOError):
    pass
