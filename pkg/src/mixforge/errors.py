class MixforgeError(ValueError):
    """Validation failure carrying a short machine-readable ``code``.

    The code is a stable kebab-case token (``"too-short"``,
    ``"degenerate-frame"``, ...) so callers and the CLI can branch on it
    without parsing messages.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
