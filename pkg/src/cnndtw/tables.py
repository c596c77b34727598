"""Utterance x keyword float32 tables, the layout behind target and score files.

Layout after the container header: meta (json), L (u32), L keyword ids,
M (u32), then M rows of (utterance id, L float32 values).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .errors import CorruptArchive, DimensionMismatch

TABLE_VERSION = 1


@dataclass
class KeywordTable:
    keyword_ids: list[str]
    utterance_ids: list[str]
    values: np.ndarray  # (M, L) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(len(self.utterance_ids), len(self.keyword_ids))
        if len(set(self.utterance_ids)) != len(self.utterance_ids):
            raise ValueError("duplicate utterance ids")
        if len(set(self.keyword_ids)) != len(self.keyword_ids):
            raise ValueError("duplicate keyword ids")
        self._row = {u: i for i, u in enumerate(self.utterance_ids)}

    @property
    def n_keywords(self) -> int:
        return len(self.keyword_ids)

    def __len__(self) -> int:
        return len(self.utterance_ids)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._row

    def row(self, utterance_id: str) -> np.ndarray:
        return self.values[self._row[utterance_id]]

    def column(self, keyword_id: str) -> np.ndarray:
        return self.values[:, self.keyword_ids.index(keyword_id)]

    def equals(self, other: "KeywordTable") -> bool:
        return (
            self.keyword_ids == other.keyword_ids
            and self.utterance_ids == other.utterance_ids
            and self.values.tobytes() == other.values.tobytes()
        )


def encode_table(table: KeywordTable, magic: bytes) -> bytes:
    w = binfmt.Writer(magic, TABLE_VERSION)
    w.json(table.meta)
    w.u32(table.n_keywords)
    for k in table.keyword_ids:
        w.text(k)
    w.u32(len(table))
    for uid, row in zip(table.utterance_ids, table.values):
        w.text(uid)
        w.array(row, "f4")
    return w.finish()


def decode_table(data: bytes, magic: bytes, cls=KeywordTable, exc=CorruptArchive):
    _, r = binfmt.open_container(data, magic, TABLE_VERSION, exc)
    meta = r.json()
    L = r.u32()
    kws = [r.text() for _ in range(L)]
    M = r.u32()
    uids, rows = [], []
    for _ in range(M):
        uids.append(r.text())
        rows.append(r.array(L, "f4"))
    r.expect_end()
    values = np.vstack(rows) if rows else np.zeros((0, L), dtype=np.float32)
    return cls(keyword_ids=kws, utterance_ids=uids, values=values, meta=meta)


def write_table(table: KeywordTable, path: str | Path, magic: bytes) -> None:
    binfmt.atomic_write(path, encode_table(table, magic))


def read_table(path: str | Path, magic: bytes, cls=KeywordTable):
    return decode_table(Path(path).read_bytes(), magic, cls)


def check_same_keywords(a: KeywordTable, b: KeywordTable) -> None:
    if a.keyword_ids != b.keyword_ids:
        raise DimensionMismatch(f"keyword lists differ: {a.keyword_ids} vs {b.keyword_ids}")
