"""Exception types shared across the package."""


class SdfHoloError(Exception):
    pass


class ShapeError(SdfHoloError, ValueError):
    pass


class DomainError(SdfHoloError, ValueError):
    pass


class NumericError(SdfHoloError, ArithmeticError):
    pass


class ConfigurationError(SdfHoloError, ValueError):
    pass


class ConsistencyError(SdfHoloError, ValueError):
    pass


class CorruptFileError(SdfHoloError, IOError):
    pass


class UnmappedLabelError(SdfHoloError, KeyError):
    def __init__(self, labels, source=None):
        self.labels = sorted(int(v) for v in labels)
        self.source = source
        super().__init__(f"unmapped label(s) {self.labels} for source {source!r}")

    def __str__(self):
        return self.args[0]


class DegeneratePartitionError(SdfHoloError, ValueError):
    def __init__(self, slab, lo, hi):
        self.slab = slab
        super().__init__(f"slab {slab!r} collapsed to zero thickness (bounds {lo}..{hi})")


class DegenerateMaskError(SdfHoloError, ValueError):
    pass


class ContractViolation(SdfHoloError, AssertionError):
    pass


class CheckpointVersionError(SdfHoloError, ValueError):
    pass
