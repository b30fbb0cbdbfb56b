"""Messages exchanged between the building coordinator and the zone controllers.

Messages are immutable values: array payloads are stored as tuples of
floats, so a message can be handed to another thread without copying and
two messages compare equal when their contents do. Power vectors in
PowerTarget and PowerReply are in ADMM power units (power_unit_w watts);
Forecast carries watts.

On the wire every message is one JSON object on one line:
``{"type": ..., "zone": ..., "iter": ..., "payload": {...}}``. The handshake
line is ``{"proto": "dpn/1", "n_zones": N, "horizon": H}``.
"""

import json
from dataclasses import dataclass, fields

import numpy as np

PROTOCOL = "dpn/1"


class MalformedFrameError(ValueError):
    """Raised when a wire frame cannot be decoded into a message."""

    pass


def _vector(values) -> tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(values, dtype=np.float64).ravel())


def _matrix(values) -> tuple[tuple[float, ...], ...]:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {array.shape}")
    return tuple(_vector(row) for row in array)


def _freeze(message, vectors: tuple[str, ...] = (), matrices: tuple[str, ...] = ()) -> None:
    for name in vectors:
        object.__setattr__(message, name, _vector(getattr(message, name)))
    for name in matrices:
        object.__setattr__(message, name, _matrix(getattr(message, name)))


def _same_length(message, *names: str) -> None:
    lengths = {len(getattr(message, name)) for name in names}
    if len(lengths) > 1:
        raise ValueError(f"{type(message).__name__}: {', '.join(names)} differ in length")


@dataclass(frozen=True)
class Handshake:
    n_zones: int
    horizon: int
    proto: str = PROTOCOL


@dataclass(frozen=True)
class Observe:
    """A zone's view of the present: lag frames plus the planning inputs.

    With prepare set, the controller also gets ready to plan (builds its
    candidate bank or initialization trajectory).
    """

    zone: int
    t: int
    obs_lags: tuple[tuple[float, ...], ...]  # (L, 2) temperature C, power W
    dist_lags: tuple[tuple[float, ...], ...]  # (L, 7)
    act_lags: tuple[float, ...]  # (L - 1,) setpoints C
    baseline: tuple[float, ...]  # (H,) setpoints C
    dists: tuple[tuple[float, ...], ...]  # (H, 7)
    prepare: bool = True

    def __post_init__(self):
        _freeze(self, ("act_lags", "baseline"), ("obs_lags", "dist_lags", "dists"))
        if len(self.obs_lags) != len(self.dist_lags) or len(self.act_lags) != len(self.obs_lags) - 1:
            raise ValueError("Observe: lag frames do not line up")
        _same_length(self, "baseline", "dists")


@dataclass(frozen=True)
class Forecast:
    """Business-as-usual, lower-bound and initialization powers of a zone, in W."""

    zone: int
    p_bu: tuple[float, ...]
    p_lb: tuple[float, ...]
    u_init: tuple[float, ...]
    elapsed: float = 0.0

    def __post_init__(self):
        _freeze(self, ("p_bu", "p_lb", "u_init"))
        _same_length(self, "p_bu", "p_lb", "u_init")


@dataclass(frozen=True)
class PowerTarget:
    zone: int
    iter: int
    u_bar: tuple[float, ...]
    lam: tuple[float, ...]

    def __post_init__(self):
        _freeze(self, ("u_bar", "lam"))
        _same_length(self, "u_bar", "lam")


@dataclass(frozen=True)
class PowerReply:
    """A zone's plan for one ADMM iteration.

    u_held is the power predicted when only the first change is applied and
    held over the horizon, which is what the building runs between replans.
    """

    zone: int
    iter: int
    u_pred: tuple[float, ...]
    delta: tuple[float, ...]
    u_held: tuple[float, ...]
    elapsed: float = 0.0

    def __post_init__(self):
        _freeze(self, ("u_pred", "delta", "u_held"))
        _same_length(self, "u_pred", "delta", "u_held")


@dataclass(frozen=True)
class Converged:
    iter: int


@dataclass(frozen=True)
class Abort:
    reason: str
    zone: int | None = None


Message = Handshake | Observe | Forecast | PowerTarget | PowerReply | Converged | Abort

MESSAGE_TYPES: dict[str, type] = {
    "observe": Observe,
    "forecast": Forecast,
    "power_target": PowerTarget,
    "power_reply": PowerReply,
    "converged": Converged,
    "abort": Abort,
}
_TYPE_NAMES = {cls: name for name, cls in MESSAGE_TYPES.items()}
_HEADER_FIELDS = ("zone", "iter")


def encode_message(message: Message) -> str:
    """One newline-terminated JSON line for a message."""
    if isinstance(message, Handshake):
        document = {"proto": message.proto, "n_zones": message.n_zones, "horizon": message.horizon}
        return json.dumps(document) + "\n"
    try:
        name = _TYPE_NAMES[type(message)]
    except KeyError as e:
        raise MalformedFrameError(f"cannot encode {type(message).__name__}") from e
    document: dict = {"type": name}
    payload = {}
    for f in fields(message):
        value = getattr(message, f.name)
        if f.name in _HEADER_FIELDS:
            document[f.name] = value
        else:
            payload[f.name] = value
    document["payload"] = payload
    return json.dumps(document) + "\n"


def decode_message(line: str | bytes) -> Message:
    """Parse one wire line back into a message.

    Raises:
        MalformedFrameError: If the line is not valid JSON or not a known message
    """
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        document = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedFrameError(f"frame is not JSON: {e}") from e
    if not isinstance(document, dict):
        raise MalformedFrameError("frame is not a JSON object")
    try:
        if "proto" in document:
            return Handshake(
                n_zones=int(document["n_zones"]),
                horizon=int(document["horizon"]),
                proto=str(document["proto"]),
            )
        kind = document.get("type")
        if kind not in MESSAGE_TYPES:
            raise MalformedFrameError(f"unknown message type {kind!r}")
        cls = MESSAGE_TYPES[kind]
        payload = document.get("payload", {})
        if not isinstance(payload, dict):
            raise TypeError("payload is not an object")
        values = {name: document[name] for name in _HEADER_FIELDS if name in document}
        return cls(**values, **payload)
    except MalformedFrameError:
        raise
    except KeyError as e:
        raise MalformedFrameError(f"frame is missing {e}") from e
    except (TypeError, ValueError) as e:
        raise MalformedFrameError(f"bad {document.get('type', 'handshake')} frame: {e}") from e
