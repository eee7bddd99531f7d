"""Text queries against a vector store."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, LabelLookupError
from .providers import synth_embedding
from .scene import save_scene
from .vecstore import VectorStore

DEFAULT_THRESHOLD = 0.28


class SyntheticTextEncoder:
    """Maps a label to its synthetic embedding, mirroring the synthetic mask embeddings."""

    def __init__(self, dim: int = 512):
        self.dim = dim

    def encode(self, text: str) -> np.ndarray:
        return synth_embedding(text, self.dim)


class LookupTextEncoder:
    """Label-to-vector table read from ``label<TAB>v1 v2 ... vD`` lines.

    Use it to feed text embeddings computed offline by a real model. Unknown
    labels raise in strict mode and fall back to the synthetic embedding
    otherwise.
    """

    def __init__(self, table: dict[str, np.ndarray], strict: bool = True):
        self.table = table
        self.strict = strict
        dims = {v.shape[0] for v in table.values()}
        if len(dims) > 1:
            raise FormatError(f"lookup table mixes dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @classmethod
    def from_file(cls, path, strict: bool = True) -> "LookupTextEncoder":
        table = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'label<TAB>values'")
            label, values = line.split("\t", 1)
            try:
                table[label] = np.array([float(v) for v in values.split()])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
        return cls(table, strict)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for label, v in self.table.items():
                fh.write(label + "\t" + " ".join(repr(float(x)) for x in v) + "\n")

    def encode(self, text: str) -> np.ndarray:
        if text in self.table:
            return self.table[text]
        if self.strict:
            raise LabelLookupError(f"label '{text}' is not in the lookup table")
        return synth_embedding(text, self.dim)


def encode_text(text: str, provider) -> np.ndarray:
    return np.asarray(provider.encode(text), dtype=np.float64)


@dataclass(frozen=True)
class QueryMode:
    kind: str  # "topk" or "threshold"
    value: float

    @classmethod
    def topk(cls, k: int) -> "QueryMode":
        return cls("topk", int(k))

    @classmethod
    def threshold(cls, tau: float = DEFAULT_THRESHOLD) -> "QueryMode":
        return cls("threshold", float(tau))


@dataclass
class Match:
    gaussian_id: int
    similarity: float
    payload: dict


@dataclass
class QueryResult:
    text: str
    vector: np.ndarray
    mode: QueryMode
    matches: list[Match] = field(default_factory=list)

    @property
    def ids(self) -> np.ndarray:
        return np.array([m.gaussian_id for m in self.matches], dtype=np.int64)


def run_query(store: VectorStore, text: str, mode: QueryMode, provider) -> QueryResult:
    q = encode_text(text, provider)
    if mode.kind == "topk":
        rows, sims = store.topk_rows(q, int(mode.value))
    elif mode.kind == "threshold":
        rows, sims = store.threshold_rows(q, mode.value)
    else:
        raise ConfigError(f"unknown query mode '{mode.kind}'")
    sims = np.clip(sims, -1.0, 1.0)
    matches = [Match(int(store.ids[r]), float(s), store.payload(r)) for r, s in zip(rows, sims)]
    return QueryResult(text, q, mode, matches)


def export_matches_ply(result: QueryResult, path) -> None:
    """Write matched Gaussians as a scene PLY, in match order."""
    from .scene import GaussianScene

    if not result.matches:
        save_scene(GaussianScene.empty(), path)
        return
    p = [m.payload for m in result.matches]
    scene = GaussianScene(
        np.array([x["mean"] for x in p]), np.array([x["scale"] for x in p]),
        np.array([x["rotation"] for x in p]), np.array([x["opacity"] for x in p]),
        np.array([x["color"] for x in p]),
    )
    save_scene(scene, path)
