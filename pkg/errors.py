#!/usr/bin/env python3
"""Exception hierarchy for evsoar-sim."""

from __future__ import annotations


class EvsoarError(Exception):
    """Base class for every error raised by the simulator."""


class InvalidArgumentError(EvsoarError, ValueError):
    """An argument is outside the domain of the operation."""


class ShapeError(InvalidArgumentError):
    """Model or feature dimensions do not line up."""


class UnknownPresetError(InvalidArgumentError):
    """A link preset name is not part of the preset table."""


class DegenerateDataError(EvsoarError):
    """Training data cannot produce a model (for example a single class)."""


class StateError(EvsoarError):
    """An operation is not allowed in the current state."""


class UnknownOemError(EvsoarError):
    """An OEM id is not registered at the Central SOAR."""


class UnknownComponentError(EvsoarError):
    """A component id is not known to the vehicle or the OEM registry."""


class PatchVersionError(EvsoarError):
    """A patch notice would move a component to an older patch version."""


class WireError(EvsoarError):
    """Base class for framing and codec failures."""


class ProtocolError(WireError):
    """Malformed frame: bad magic, bad version, truncation or bad body."""


class CorruptionError(WireError):
    """Frame checksum does not match its payload."""


class UnsupportedKindError(WireError):
    """Frame carries a message kind code this codec does not know."""


class EncodeError(WireError):
    """A message cannot be laid out as a frame."""


class SessionAborted(EvsoarError):
    """A charging session was aborted; uploaded buffers are retained."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason
