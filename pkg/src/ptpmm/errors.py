"""Exception types shared across the package."""


class PtpmmError(Exception):
    """Base class for all package-specific errors."""


class DegenerateFitError(PtpmmError):
    """Empirical density fit is degenerate (e.g. all samples identical)."""


class DegenerateDesignError(PtpmmError):
    """Least-squares design matrix is rank deficient."""


class InfeasibleStartError(PtpmmError):
    """No finite-likelihood starting point found for the local search."""


class EmptyPosteriorError(PtpmmError):
    """Posterior density has no finite mass inside the searched region."""


class UnboundedPosteriorError(PtpmmError):
    """Posterior mass region could not be bounded by box expansion."""


class UnstableLoadError(PtpmmError):
    """Simulated queue grew past the configured event cap."""


class ExperimentError(PtpmmError):
    """Monte-Carlo experiment failed (e.g. too many failed trials)."""
