"""Exception types shared across the package."""


class AnchorFlowError(Exception):
    """Base class for all anchorflow errors."""


class SingularTransform(AnchorFlowError):
    """Affine linear part is not invertible at the required tolerance."""


class DimensionMismatch(AnchorFlowError):
    """Inputs that must share a grid/shape do not."""


class MaskNotNormalized(AnchorFlowError):
    """Per-pixel mask weights do not sum to one within tolerance."""


class MissingRoot(AnchorFlowError):
    """Operation needs a root anchor but the anchor set has none."""


class TooManyLevels(AnchorFlowError):
    """Pyramid would shrink a dimension below two pixels."""


class InvalidConfig(AnchorFlowError):
    """Fit configuration violates its invariants."""


class NonFiniteLoss(AnchorFlowError):
    """Fitting produced a non-finite loss or parameter value."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        msg = f"non-finite loss at iteration {iteration}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyForeground(AnchorFlowError):
    """Foreground mask selects no pixels."""


class MotionOutOfFrame(AnchorFlowError):
    """Scene motion would push foreground within 2 px of the frame border."""
