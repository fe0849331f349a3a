class ClarError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ClarError, ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AlignmentError(ClarError, ValueError):
    pass


class WindowError(ClarError, IndexError):
    pass


class DataError(ClarError, ValueError):
    pass


class TrainingError(ClarError, RuntimeError):
    pass
