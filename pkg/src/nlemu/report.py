"""Structured report documents (``schema: 1``) and their JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from . import __version__
from .detector import DetectionReport

SCHEMA = 1
TOOL = "nlemu"


def _name(x) -> str | None:
    return None if x is None else str(getattr(x, "value", x))


def _ranges(offsets: list[int]) -> list[list[int]]:
    """Collapse sorted offsets into half-open [start, stop) ranges."""
    out: list[list[int]] = []
    for o in offsets:
        if out and out[-1][1] == o:
            out[-1][1] = o + 1
        else:
            out.append([o, o + 1])
    return out


@dataclass
class BufferResult:
    id: str
    source: str | None
    stream_offset: int | None
    length: int
    verdict: str
    offset: int | None
    getpc: dict | None
    read_count: int
    termination: str | None
    chains_run: int
    skipped: int
    skipped_ranges: list[list[int]]
    terminations: dict[str, int]
    convicting_offsets: list[int]
    chains: list[list] | None = None

    @classmethod
    def from_detection(cls, report: DetectionReport, *, with_chains: bool = False) -> "BufferResult":
        v = report.verdict
        getpc = None
        if v.getpc is not None:
            getpc = {"kind": v.getpc.kind, "at_eip": v.getpc.at_eip,
                     "recovered_address": v.getpc.recovered_address}
        chains = None
        if with_chains:
            chains = [[c.offset, c.retired, _name(c.termination), list(c.getpc), c.buffer_reads, c.verdict]
                      for c in report.chains]
        return cls(
            id=report.buffer_id,
            source=report.origin[0] if report.origin else None,
            stream_offset=report.origin[1] if report.origin else None,
            length=report.length,
            verdict=v.label,
            offset=v.offset,
            getpc=getpc,
            read_count=v.read_count,
            termination=_name(v.termination),
            chains_run=len(report.chains),
            skipped=len(report.skipped),
            skipped_ranges=_ranges(report.skipped),
            terminations={_name(k): n for k, n in report.termination_counts().items()},
            convicting_offsets=report.convicting_offsets,
            chains=chains,
        )


@dataclass
class ReportDocument:
    command: str
    config: dict
    buffers: list[BufferResult]
    extra: dict = field(default_factory=dict)
    wall_time: float | None = None
    version: str = __version__
    schema: int = SCHEMA
    tool: str = TOOL

    @property
    def aggregate(self) -> dict:
        return {
            "buffers": len(self.buffers),
            "convicted": sum(b.verdict == "shellcode" for b in self.buffers),
            "skipped_offsets": sum(b.skipped for b in self.buffers),
        }

    def to_dict(self) -> dict:
        doc = {
            "schema": self.schema,
            "tool": self.tool,
            "version": self.version,
            "command": self.command,
            "config": self.config,
            "buffers": [{k: v for k, v in asdict(b).items() if k != "chains" or v is not None}
                        for b in self.buffers],
            "aggregate": self.aggregate,
        }
        if self.extra:
            doc["extra"] = self.extra
        if self.wall_time is not None:
            doc["wall_time_s"] = round(self.wall_time, 6)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ReportDocument":
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
        buffers = [BufferResult(**{"chains": None, **b}) for b in doc["buffers"]]
        report = cls(
            command=doc["command"],
            config=doc["config"],
            buffers=buffers,
            extra=doc.get("extra", {}),
            wall_time=doc.get("wall_time_s"),
            version=doc["version"],
            schema=doc["schema"],
            tool=doc["tool"],
        )
        if report.aggregate != doc["aggregate"]:
            raise ValueError("aggregate counts disagree with the buffer entries")
        return report

    @classmethod
    def from_json(cls, text: str) -> "ReportDocument":
        return cls.from_dict(json.loads(text))
