"""Exception types shared across the toolkit."""


class BudgetExceeded(Exception):
    """Raised before a query batch would push the ledger past its budget.

    The batch is not run and nothing is charged; the caller finalizes the
    attack as failed.
    """

    def __init__(self, used, budget, requested):
        self.used = used
        self.budget = budget
        self.requested = requested
        super().__init__(
            f"query batch of {requested} would exceed budget "
            f"({used} used of {budget})"
        )


class ShapeMismatch(ValueError):
    """Image geometry does not match the victim's expected input shape."""


class UnknownAdapter(KeyError):
    """No victim adapter registered under the requested name."""


class WeightsUnavailable(IOError):
    """Model weights could not be located or loaded."""


class MissingTexture(KeyError):
    """The (category, index) entry is absent from the texture dictionary."""

    def __init__(self, category, index):
        self.category = category
        self.index = index
        super().__init__(f"no texture for category={category!r} index={index}")


class InsufficientSamples(ValueError):
    """Fewer embeddings than requested clusters."""


class DatasetUnavailable(IOError):
    """Dataset locator does not resolve to readable data."""
