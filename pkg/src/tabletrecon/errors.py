"""Exception types raised across the package."""


class TabletError(Exception):
    """Base class for all package errors."""


class DegenerateBasis(TabletError):
    pass


class AntiparallelNormals(TabletError):
    pass


class InvalidDistance(TabletError):
    pass


class EmptySuperpixel(TabletError):
    pass


class NonFiniteGradient(TabletError):
    def __init__(self, message: str, tablet_id: int | None = None):
        super().__init__(message)
        self.tablet_id = tablet_id


class NonFiniteLoss(TabletError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class NotFound(TabletError):
    pass


class SceneLoadError(TabletError):
    pass


class SingleFragment(TabletError):
    """Raised internally when keyframe selection cannot form fragments."""
