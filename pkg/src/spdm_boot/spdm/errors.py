from ..codes import StatusCode, format_code


class SpdmError(Exception):
    """Protocol failure carrying a status code."""

    def __init__(self, code: int, message: str = ""):
        self.code = StatusCode(code) if code in StatusCode._value2member_map_ else code
        super().__init__(f"{format_code(code)} {message}".strip())


class DecodeError(SpdmError, ValueError):
    def __init__(self, message: str):
        super().__init__(StatusCode.INVALID_REQUEST, message)


class TruncatedMessage(DecodeError):
    pass


class UnknownKind(DecodeError):
    pass


class OrderingError(SpdmError):
    """Operation requested out of the enforced order; the context is left untouched."""

    def __init__(self, message: str):
        super().__init__(StatusCode.ORDERING_VIOLATION, message)
