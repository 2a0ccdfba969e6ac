#!/usr/bin/env python3
"""Input validation and credential handling for evsoar-sim."""

import hmac
import os
import re
from typing import List

AUTH_TOKEN_BYTES = 16


class SecurityValidator:
    """Validation helpers for names, paths and vehicle auth tokens."""

    MAX_NAME_LENGTH = 64
    MAX_PATH_LENGTH = 500
    MAX_SEED = 2**64 - 1

    # preset labels are letters, digits and dashes
    SAFE_PRESET_PATTERN = re.compile(r"^[A-Za-z0-9._-]+$")

    @classmethod
    def validate_preset_name(cls, name: str) -> str:
        """Validate a link preset name."""
        if not name or not isinstance(name, str):
            raise ValueError("Preset name must be a non-empty string")

        if len(name) > cls.MAX_NAME_LENGTH:
            raise ValueError(
                f"Preset name exceeds maximum length of {cls.MAX_NAME_LENGTH}"
            )

        if not cls.SAFE_PRESET_PATTERN.match(name):
            raise ValueError(f"Preset name contains invalid characters: {name!r}")

        return name

    @classmethod
    def validate_preset_list(cls, raw: str) -> List[str]:
        """Split a comma-separated --preset value and validate every entry."""
        names = [part.strip() for part in raw.split(",") if part.strip()]
        if not names:
            raise ValueError("Preset list is empty")
        return [cls.validate_preset_name(name) for name in names]

    @classmethod
    def validate_file_path(cls, path: str) -> str:
        """Validate an output or config path."""
        if not path or not isinstance(path, str):
            raise ValueError("File path must be a non-empty string")

        if len(path) > cls.MAX_PATH_LENGTH:
            raise ValueError(
                f"File path exceeds maximum length of {cls.MAX_PATH_LENGTH}"
            )

        if "\x00" in path:
            raise ValueError("File path contains null bytes")

        if ".." in path.split(os.sep):
            raise ValueError("File path contains path traversal sequences")

        return os.path.normpath(path)

    @classmethod
    def validate_seed(cls, seed: int) -> int:
        """Seeds are unsigned 64-bit integers."""
        if not 0 <= seed <= cls.MAX_SEED:
            raise ValueError("Seed must be an unsigned 64-bit integer")
        return seed

    @classmethod
    def validate_auth_token(cls, token: bytes) -> bytes:
        """Vehicle tokens are opaque 16-byte values."""
        if not isinstance(token, (bytes, bytearray)):
            raise ValueError("Auth token must be bytes")
        if len(token) != AUTH_TOKEN_BYTES:
            raise ValueError(f"Auth token must be exactly {AUTH_TOKEN_BYTES} bytes")
        return bytes(token)

    @classmethod
    def tokens_match(cls, presented: bytes, expected: bytes) -> bool:
        """Constant-time token equality."""
        return hmac.compare_digest(bytes(presented), bytes(expected))

    @classmethod
    def sanitize_for_logging(cls, message: str) -> str:
        """Redact auth tokens before a message reaches the console."""
        if not message:
            return message

        patterns = [
            (r"token[=:\s]+[^\s,]+", "token=[REDACTED]"),
            (r"\b[0-9a-fA-F]{32}\b", "[TOKEN_REDACTED]"),  # hex-encoded tokens
        ]

        sanitized = message
        for pattern, replacement in patterns:
            sanitized = re.sub(pattern, replacement, sanitized, flags=re.IGNORECASE)

        return sanitized


def vehicle_token(seed: int, vehicle_id: int) -> bytes:
    """Deterministic provisioning token for a simulated vehicle."""
    key = seed.to_bytes(8, "big")
    return hmac.new(key, vehicle_id.to_bytes(8, "big"), "sha256").digest()[
        :AUTH_TOKEN_BYTES
    ]
