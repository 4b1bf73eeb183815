"""Exception types shared across the simulator."""


class XneError(Exception):
    """Base class for all simulator errors."""


class ShapeError(XneError):
    """Tensor or layer geometry is inconsistent."""


class DegenerateBatchNorm(XneError):
    """Batch-norm scale is zero; the sign of the activation is undefined."""


class UcodeSyntaxError(XneError):
    """Microcode source or bitstream cannot be parsed."""


class DecodeError(XneError):
    """A binary container (tensor file, bitstream) is malformed."""


class BusyError(XneError):
    """A job was offloaded while both register sets were occupied."""


class RegionError(XneError):
    """Access to a memory region that is powered off or out of range."""


class CapacityError(XneError):
    """A network or layer does not fit the selected memory region."""


class PlanError(XneError):
    """A layer cannot be mapped onto the engine as configured."""
