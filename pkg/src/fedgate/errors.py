"""Exception taxonomy shared across the service.

Each error carries the HTTP status the gateway maps it to, so handlers can
translate uniformly into OpenAI-style error bodies.
"""

from __future__ import annotations


class FedgateError(Exception):
    """Base class; ``http_status`` drives the gateway's response code."""

    http_status = 500
    error_type = "server_error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__


# -- auth ------------------------------------------------------------------

class InvalidToken(FedgateError):
    http_status = 401
    error_type = "authentication_error"


class ExpiredToken(FedgateError):
    http_status = 401
    error_type = "authentication_error"


class PermissionDenied(FedgateError):
    http_status = 403
    error_type = "permission_error"


# -- registry / routing ------------------------------------------------------

class UnknownModel(FedgateError):
    http_status = 404
    error_type = "invalid_request_error"


class NotFound(FedgateError):
    http_status = 404
    error_type = "invalid_request_error"


class DuplicateModel(FedgateError):
    http_status = 409
    error_type = "invalid_request_error"


class NoEndpoint(FedgateError):
    http_status = 404
    error_type = "invalid_request_error"


class UnknownCluster(FedgateError):
    http_status = 404
    error_type = "invalid_request_error"


# -- validation / limits -----------------------------------------------------

class ValidationError(FedgateError):
    http_status = 422
    error_type = "invalid_request_error"

    def __init__(self, message: str = "", lines: list[int] | None = None):
        super().__init__(message)
        self.lines = lines or []


class RateLimited(FedgateError):
    http_status = 429
    error_type = "rate_limit_error"

    def __init__(self, message: str = "", retry_after: float = 1.0):
        super().__init__(message)
        self.retry_after = retry_after


class Overloaded(FedgateError):
    """Backpressure: pending-task cap reached, or no endpoint can serve."""

    http_status = 503
    error_type = "service_unavailable"


# -- fabric ------------------------------------------------------------------

class EndpointDown(FedgateError):
    http_status = 503
    error_type = "service_unavailable"


class TaskFailed(FedgateError):
    http_status = 502
    error_type = "upstream_error"


class CapacityExceeded(FedgateError):
    http_status = 503
    error_type = "service_unavailable"


class InsufficientVRAM(FedgateError):
    http_status = 502
    error_type = "upstream_error"


class UnregisteredFunction(FedgateError):
    http_status = 403
    error_type = "permission_error"


class IllegalTransition(FedgateError):
    """Instance state machine violation; indicates a fabric bug."""


# -- backends ------------------------------------------------------------------

class BackendUnavailable(FedgateError):
    http_status = 502
    error_type = "upstream_error"


class UpstreamError(FedgateError):
    http_status = 502
    error_type = "upstream_error"

    def __init__(self, message: str = "", status: int = 502):
        super().__init__(message)
        self.status = status
