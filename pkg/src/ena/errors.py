"""Exception types shared across the package."""


class GeometryError(ValueError):
    """A grid, tile, window or permutation layout is inconsistent."""


class ConfigError(ValueError):
    """A model or run configuration violates a precondition."""


class MixerContractError(ValueError):
    """A token mixer changed the shape of its input."""


class InvariantViolation(AssertionError):
    """A structural invariant (bijectivity, census consistency, ...) does not hold."""
