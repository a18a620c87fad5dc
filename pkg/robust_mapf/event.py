import json
import re
from dataclasses import KW_ONLY, dataclass
from datetime import datetime, timezone
from typing import Any, Iterator, Mapping, Optional, Union

SEPARATORS = ("\r\n", "\r", "\n")
_NEWLINE = re.compile(r"\r\n|\r|\n")


@dataclass
class ProgressEvent:
    """
    One Server-Sent Events frame of a training progress stream.

    Field order on the wire: comment lines, id, event, data lines, retry.
    """

    data: Optional[Any] = None
    _: KW_ONLY
    event: Optional[str] = None
    id: Optional[str] = None
    retry: Optional[int] = None
    comment: Optional[str] = None
    sep: str = "\r\n"

    def __post_init__(self) -> None:
        if self.sep not in SEPARATORS:
            raise ValueError(f"sep must be one of: \\r\\n, \\r, \\n, got: {self.sep!r}")

    @classmethod
    def from_record(cls, record: Mapping[str, Any], sep: str = "\r\n") -> "ProgressEvent":
        """Frame for one training-log record; the iteration number is the event id."""
        return cls(json.dumps(record, sort_keys=True), event="iteration", id=str(record.get("iter", "")), sep=sep)

    @classmethod
    def end(cls, sep: str = "\r\n") -> "ProgressEvent":
        return cls("{}", event="end", sep=sep)

    @classmethod
    def ping(cls, sep: str = "\r\n") -> "ProgressEvent":
        return cls(comment=f"ping - {datetime.now(timezone.utc)}", sep=sep)

    def _fields(self) -> Iterator[str]:
        if self.comment is not None:
            yield from (f": {line}" for line in _NEWLINE.split(str(self.comment)))
        if self.id is not None:
            yield "id: " + _NEWLINE.sub("", self.id)
        if self.event is not None:
            yield "event: " + _NEWLINE.sub("", self.event)
        if self.data is not None:
            yield from (f"data: {line}" for line in _NEWLINE.split(str(self.data)))
        if self.retry is not None:
            if not isinstance(self.retry, int):
                raise TypeError("retry argument must be int")
            yield f"retry: {self.retry}"

    def encode(self) -> bytes:
        return "".join(line + self.sep for line in [*self._fields(), ""]).encode("utf-8")


def ensure_bytes(data: Union[bytes, Mapping[str, Any], ProgressEvent, Any], sep: str) -> bytes:
    """Wire bytes for an event, a raw chunk, a training-log record or any other payload."""
    if isinstance(data, bytes):
        return data
    if isinstance(data, ProgressEvent):
        return data.encode()
    if isinstance(data, Mapping):
        return ProgressEvent.from_record(data, sep=sep).encode()
    return ProgressEvent(str(data), sep=sep).encode()
