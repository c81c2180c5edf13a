"""Exception hierarchy shared by every voxelview module."""


class VoxelViewError(Exception):
    """Base class for all errors raised by voxelview."""


class InvalidParam(VoxelViewError, ValueError):
    pass


class DegenerateUp(VoxelViewError, ValueError):
    """Viewpoint is (nearly) parallel to the up vector."""


class ResolutionMismatch(VoxelViewError, ValueError):
    pass


class BadMagic(VoxelViewError, ValueError):
    pass


class TruncatedFile(VoxelViewError, ValueError):
    pass


class ValueOutOfRange(VoxelViewError, ValueError):
    pass


class EmptyHypotheses(VoxelViewError, ValueError):
    pass


class ConfigError(VoxelViewError, ValueError):
    pass


class DegenerateCloud(VoxelViewError, ValueError):
    pass


class LengthMismatch(VoxelViewError, ValueError):
    pass


class DegenerateMean(VoxelViewError, ValueError):
    pass
