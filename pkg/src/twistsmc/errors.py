"""Exception types shared across modules."""


class TwistSmcError(Exception):
    """Base class for all library errors."""


class TooLargeForEnumeration(TwistSmcError):
    """Raised when an exhaustive computation would exceed the state guard."""

    def __init__(self, n_states, limit):
        self.n_states = n_states
        self.limit = limit
        super().__init__(f"joint state space has {n_states} states, guard is {limit}")
