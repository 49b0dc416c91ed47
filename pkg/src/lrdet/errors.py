"""Error taxonomy: contract violations vs numeric failures."""


class ContractError(ValueError):
    """Caller broke an interface contract: bad shape, dtype, or config."""


class NumericError(ArithmeticError):
    """Computation produced non-finite values (NaN loss, inf gradient)."""
