##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Exception hierarchy shared by every FITKit module. Library code raises these; the pipeline     #
# scripts catch them at the MAIN boundary, log them and translate them into exit codes:          #
#   - ValidationError (and subclasses) -> exit code 1                                            #
#   - NumericalError                   -> exit code 2                                            #
##################################################################################################


class FitKitError(Exception):
    """Base class for all FITKit errors."""

    exit_code = 1


class ValidationError(FitKitError):
    """Invalid input, configuration or document schema."""

    exit_code = 1


class ShapeError(ValidationError):
    """
    Shape mismatch detected while building or replaying a graph, or while assembling a model.

    Attributes:
        node_id (int | None): Graph node where the mismatch was detected.
        layer (str | None): Model layer name, when the error comes from model construction.
    """

    def __init__(self, message, node_id=None, layer=None):
        super().__init__(message)
        self.node_id = node_id
        self.layer = layer


class OracleLimitError(ValidationError):
    """Dense oracle requested for a parameter count above the oracle limit."""


class StateError(FitKitError):
    """Operation called in the wrong order (e.g. backward before forward)."""

    exit_code = 1


class NumericalError(FitKitError):
    """
    Non-finite value or divergence.

    Attributes:
        epoch (int | None): Training epoch where the loss diverged.
        block (str | None): Parameter block or activation site with a non-finite gradient.
        batch (int | None): Estimator iteration (sampled batch) where it happened.
    """

    exit_code = 2

    def __init__(self, message, epoch=None, block=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.block = block
        self.batch = batch


class IndeterminateError(FitKitError):
    """A statistic is undefined for the given inputs (constant ranks, zero reference trace)."""

    exit_code = 2
