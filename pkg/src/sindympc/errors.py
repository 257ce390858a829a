"""Exception types shared across the toolkit."""


class SingularAttitude(ValueError):
    """Pitch is within the configured margin of +/-90 deg, where the map
    from body rates to Euler-angle rates loses rank."""


class DivergedSimulation(RuntimeError):
    """A simulated state left the configured validity envelope."""


class DataError(ValueError):
    """Malformed or internally inconsistent logged data."""


class TooFewSamples(DataError):
    """Not enough snapshot rows for the requested operation."""


class UnknownChannel(LookupError):
    """A library term references a channel the snapshot set does not carry."""


class RankDeficient(RuntimeError):
    """The active regression columns lost rank, which signals insufficient
    excitation in the collected data."""

    def __init__(self, column, terms):
        self.column = column
        self.terms = list(terms)
        super().__init__(
            f"rank-deficient candidate library for output {column!r}; "
            f"active terms: {', '.join(self.terms)}"
        )


class InfeasibleStart(RuntimeError):
    """The controller was asked to plan from deep inside a keep-out sphere."""


class ConfigError(ValueError):
    """Bad experiment configuration file."""
