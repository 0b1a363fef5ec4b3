from __future__ import annotations

from dataclasses import dataclass, replace

DATA = "data"
LANDMARK = "landmark"
CONTROL = "control"
KINDS = (DATA, LANDMARK, CONTROL)


@dataclass(frozen=True)
class Message:
    """Envelope plus opaque payload.

    ``seq`` and ``source`` are stamped by the engine when a pellet emits;
    landmark and control messages carry their label in ``payload``.
    """

    payload: bytes = b""
    kind: str = DATA
    key: bytes | None = None
    seq: int = 0
    source: str = ""
    port: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.kind != DATA and not self.payload:
            raise ValueError(f"{self.kind} messages need a non-empty label")

    @property
    def is_data(self) -> bool:
        return self.kind == DATA

    @property
    def label(self) -> str:
        p = self.payload
        return p.decode() if isinstance(p, (bytes, bytearray)) else str(p)

    def stamped(self, source: str, port: str, seq: int) -> "Message":
        return replace(self, source=source, port=port, seq=seq)


def data(payload: bytes, key: bytes | None = None) -> Message:
    return Message(payload=payload, key=key)


def landmark(label: str | bytes) -> Message:
    return Message(payload=label.encode() if isinstance(label, str) else label, kind=LANDMARK)


def control(label: str | bytes) -> Message:
    return Message(payload=label.encode() if isinstance(label, str) else label, kind=CONTROL)
