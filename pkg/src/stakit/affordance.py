"""Environment-affordance memory: zones, retrieval, fusion, and persistence.

An affordance zone is a connected component of frames linked by temporal
closeness or visual similarity; it stores binary indicator vectors of the
nouns and verbs annotated anywhere in the zone plus mean visual (and
optionally text) descriptors of its members. The database of zones works
as a persistent memory of what interactions each place affords.

Two retrieval paths are provided. The fixed path takes the K nearest
zones by visual cosine similarity and the K nearest by query-to-text
cosine similarity, sums similarity-weighted indicators over the combined
2K entries, and softmaxes per class axis; the result is late-fused with
model probabilities. The learned path scores every zone with
sigmoid(q . k_j) from trainable query/key projections and max-pools each
class over zones containing it, producing per-class binary probabilities
that are injected into the classifier logits both at training and at
inference time.

Database file format "AFFDB" (all integers little-endian):

    magic b"AFFDB", version u16, sha256 taxonomy hash (32 bytes),
    n_nouns u32, n_verbs u32, embed_dim u32, n_zones u32,
    noun names then verb names (u16 length + UTF-8 each), then per zone:
    zone_id u32, member count u16 (+ UTF-8 members), noun indicator
    bitset, verb indicator bitset (LSB-first), flags u8 (bit 0 = has
    text descriptor), visual descriptor f32[embed_dim], optional text
    descriptor f32[embed_dim].
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    AllZero,
    CorruptFile,
    EmptyInput,
    KTooLarge,
    MissingTextDescriptors,
    ShapeMismatch,
    VersionMismatch,
)
from .records import Taxonomy

AFFDB_MAGIC = b"AFFDB"
AFFDB_VERSION = 1


@dataclass(frozen=True)
class ZoneFrame:
    """One frame/clip observation entering zone construction."""

    frame_index: int
    clip_id: str
    nouns: frozenset[int]
    verbs: frozenset[int]
    visual_embedding: np.ndarray
    text_embedding: np.ndarray | None = None


# oracle returns (same-zone probability, homography inlier count)
SimilarityOracle = Callable[[ZoneFrame, ZoneFrame], tuple[float, int]]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def embedding_cosine_oracle(a: ZoneFrame, b: ZoneFrame) -> tuple[float, int]:
    """Default similarity oracle: cosine of visual embeddings mapped to [0, 1]."""
    return (cosine(a.visual_embedding, b.visual_embedding) + 1.0) / 2.0, 0


@dataclass
class AffordanceZone:
    zone_id: int
    member_clip_ids: tuple[str, ...]
    noun_indicator: np.ndarray  # uint8 [n_nouns]
    verb_indicator: np.ndarray  # uint8 [n_verbs]
    visual_descriptor: np.ndarray  # float32 [embed_dim]
    text_descriptor: np.ndarray | None = None


@dataclass
class AffordanceDB:
    taxonomy: Taxonomy
    zones: tuple[AffordanceZone, ...]
    embed_dim: int
    version: int = AFFDB_VERSION

    def __post_init__(self) -> None:
        ids = [z.zone_id for z in self.zones]
        if len(set(ids)) != len(ids):
            raise CorruptFile("zone ids must be unique")
        for zone in self.zones:
            if zone.visual_descriptor.shape != (self.embed_dim,):
                raise ShapeMismatch("zone descriptor dim differs from database dim")

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    def has_text_descriptors(self) -> bool:
        return all(z.text_descriptor is not None for z in self.zones)


@dataclass
class AffordanceDistribution:
    """Per-axis affordance probabilities plus the mode they live in.

    ``normalized`` distributions sum to one per axis (fixed retrieval);
    ``per_class_binary`` entries are independent probabilities in [0, 1]
    (learned retrieval). ``neighbors`` records the (zone_id, similarity)
    entries that produced a fixed-path distribution.
    """

    noun_probs: np.ndarray
    verb_probs: np.ndarray
    mode: str
    used_text: bool = True
    neighbors: tuple[tuple[int, float], ...] = ()


def build_zones(
    frames: Sequence[ZoneFrame],
    similarity: SimilarityOracle = embedding_cosine_oracle,
    temporal_gap: int = 15,
    inlier_threshold: int = 10,
    p_link: float = 0.5,
    *,
    n_nouns: int,
    n_verbs: int,
) -> list[AffordanceZone]:
    """Link frames into zones and aggregate indicators and descriptors.

    Two frames link when they are fewer than ``temporal_gap`` frames
    apart, share at least ``inlier_threshold`` homography inliers, or the
    oracle probability reaches ``p_link``; zones are the connected
    components of the link graph. Indicators are the union of member
    nouns/verbs and descriptors the member means. Text descriptors exist
    only if every member carries one.
    """
    if not frames:
        raise EmptyInput("cannot build zones from zero frames")

    n = len(frames)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for i in range(n):
        for j in range(i + 1, n):
            if abs(frames[i].frame_index - frames[j].frame_index) < temporal_gap:
                union(i, j)
                continue
            prob, inliers = similarity(frames[i], frames[j])
            if inliers >= inlier_threshold or prob >= p_link:
                union(i, j)

    components: dict[int, list[int]] = {}
    for i in range(n):
        components.setdefault(find(i), []).append(i)

    zones: list[AffordanceZone] = []
    for zone_id, root in enumerate(sorted(components)):
        members = sorted(components[root], key=lambda i: (frames[i].frame_index, frames[i].clip_id))
        noun_ind = np.zeros(n_nouns, dtype=np.uint8)
        verb_ind = np.zeros(n_verbs, dtype=np.uint8)
        for i in members:
            for noun in frames[i].nouns:
                noun_ind[noun] = 1
            for verb in frames[i].verbs:
                verb_ind[verb] = 1
        visual = np.stack([frames[i].visual_embedding for i in members]).mean(axis=0)
        text = None
        if all(frames[i].text_embedding is not None for i in members):
            text = np.stack([frames[i].text_embedding for i in members]).mean(axis=0).astype(np.float32)
        zones.append(
            AffordanceZone(
                zone_id=zone_id,
                member_clip_ids=tuple(frames[i].clip_id for i in members),
                noun_indicator=noun_ind,
                verb_indicator=verb_ind,
                visual_descriptor=visual.astype(np.float32),
                text_descriptor=text,
            )
        )
    return zones


# ---------------------------------------------------------------------------
# fixed retrieval + late fusion


def _top_k(sims: np.ndarray, k: int) -> list[int]:
    return list(np.argsort(-sims, kind="stable")[:k])


def knn_affordance(
    query_embedding: np.ndarray,
    db: AffordanceDB,
    k: int,
    temperature: float = 1.0,
) -> AffordanceDistribution:
    """Fixed retrieval: softmax of similarity-weighted indicator sums.

    Combines the top-K zones by visual similarity with the top-K by
    query-to-text similarity (2K entries; a zone retrieved by both paths
    contributes once per path). When text descriptors are missing the
    retrieval degrades to the visual K entries and warns.
    """
    if k > db.n_zones:
        raise KTooLarge(f"k={k} exceeds {db.n_zones} zones")
    query = np.asarray(query_embedding, dtype=np.float64)

    visual_sims = np.array([cosine(query, z.visual_descriptor) for z in db.zones])
    entries: list[tuple[int, float]] = [(i, float(visual_sims[i])) for i in _top_k(visual_sims, k)]
    used_text = db.has_text_descriptors()
    if used_text:
        text_sims = np.array([cosine(query, z.text_descriptor) for z in db.zones])
        entries += [(i, float(text_sims[i])) for i in _top_k(text_sims, k)]
    else:
        warnings.warn(
            "zone database has no text descriptors; using visual neighbors only",
            MissingTextDescriptors,
        )

    noun_logits = np.zeros(db.taxonomy.n_nouns, dtype=np.float64)
    verb_logits = np.zeros(db.taxonomy.n_verbs, dtype=np.float64)
    for zone_idx, sim in entries:
        zone = db.zones[zone_idx]
        noun_logits += sim * zone.noun_indicator
        verb_logits += sim * zone.verb_indicator

    def softmax(logits: np.ndarray) -> np.ndarray:
        z = logits / temperature
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    return AffordanceDistribution(
        noun_probs=softmax(noun_logits),
        verb_probs=softmax(verb_logits),
        mode="normalized",
        used_text=used_text,
        neighbors=tuple((db.zones[i].zone_id, s) for i, s in entries),
    )


def late_fuse(aff_probs: np.ndarray, sta_probs: np.ndarray) -> np.ndarray:
    """Renormalized elementwise product of affordance and model distributions."""
    aff = np.asarray(aff_probs, dtype=np.float64)
    sta = np.asarray(sta_probs, dtype=np.float64)
    if aff.shape != sta.shape:
        raise ShapeMismatch(f"distribution lengths differ: {aff.shape} vs {sta.shape}")
    joint = aff * sta
    total = joint.sum()
    if total == 0.0:
        raise AllZero("joint likelihood vanished for every class")
    return joint / total


# ---------------------------------------------------------------------------
# learned retrieval + logit injection


def affordance_scores(query: Tensor, zone_descriptors: Tensor, w_q: Tensor, w_k: Tensor) -> Tensor:
    """Per-zone similarity gates: sigmoid((query @ w_q) . (descriptor @ w_k))."""
    q = query @ w_q
    keys = zone_descriptors @ w_k
    return torch.sigmoid(keys @ q)


def learned_affordance(
    query: Tensor,
    db: AffordanceDB,
    w_q: Tensor,
    w_k: Tensor,
) -> tuple[Tensor, Tensor]:
    """Per-class max over zone gates; returns (noun_probs, verb_probs) tensors.

    Each class receives the largest gate among zones containing it and
    exactly zero when no zone contains it.
    """
    if db.n_zones == 0:
        raise EmptyInput("affordance database has no zones")
    dtype, device = query.dtype, query.device
    descriptors = torch.tensor(
        np.stack([z.visual_descriptor for z in db.zones]), dtype=dtype, device=device
    )
    gates = affordance_scores(query, descriptors, w_q, w_k)
    noun_ind = torch.tensor(
        np.stack([z.noun_indicator for z in db.zones]), dtype=dtype, device=device
    )
    verb_ind = torch.tensor(
        np.stack([z.verb_indicator for z in db.zones]), dtype=dtype, device=device
    )
    noun_probs = (gates.unsqueeze(1) * noun_ind).max(dim=0).values
    verb_probs = (gates.unsqueeze(1) * verb_ind).max(dim=0).values
    return noun_probs, verb_probs


class LearnedAffordance(nn.Module):
    """Trainable retrieval head over a frozen zone database."""

    def __init__(self, db: AffordanceDB, query_dim: int, attn_dim: int = 32):
        super().__init__()
        if db.n_zones == 0:
            raise EmptyInput("affordance database has no zones")
        self.w_q = nn.Parameter(torch.randn(query_dim, attn_dim) * (query_dim**-0.5))
        self.w_k = nn.Parameter(torch.randn(db.embed_dim, attn_dim) * (db.embed_dim**-0.5))
        self.register_buffer(
            "descriptors", torch.tensor(np.stack([z.visual_descriptor for z in db.zones]), dtype=torch.float32)
        )
        self.register_buffer(
            "noun_ind", torch.tensor(np.stack([z.noun_indicator for z in db.zones]), dtype=torch.float32)
        )
        self.register_buffer(
            "verb_ind", torch.tensor(np.stack([z.verb_indicator for z in db.zones]), dtype=torch.float32)
        )

    def forward(self, query: Tensor) -> tuple[Tensor, Tensor]:
        gates = affordance_scores(query, self.descriptors.to(query.dtype), self.w_q, self.w_k)
        noun_probs = (gates.unsqueeze(1) * self.noun_ind.to(query.dtype)).max(dim=0).values
        verb_probs = (gates.unsqueeze(1) * self.verb_ind.to(query.dtype)).max(dim=0).values
        return noun_probs, verb_probs


def logit_inject(p_aff: Tensor, logits: Tensor, eps: float = 1e-6):
    """Shift classifier logits by the affordance log-odds.

    out_c = logits_c + log(p_aff_c + eps) - log(1 - p_aff_c + eps); the
    same transform is applied when training (before the BCE loss) and at
    inference (before the final sigmoid). Accepts torch tensors or numpy
    arrays, returning the same kind.
    """
    if isinstance(p_aff, Tensor) or isinstance(logits, Tensor):
        return logits + torch.log(p_aff + eps) - torch.log(1.0 - p_aff + eps)
    p = np.asarray(p_aff, dtype=np.float64)
    return np.asarray(logits, dtype=np.float64) + np.log(p + eps) - np.log(1.0 - p + eps)


# ---------------------------------------------------------------------------
# persistence


def _pack_bitset(indicator: np.ndarray) -> bytes:
    return bytes(np.packbits(indicator.astype(np.uint8), bitorder="little"))


def _unpack_bitset(blob: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")[:n].astype(np.uint8)


def _write_str(parts: list[bytes], text: str) -> None:
    raw = text.encode("utf-8")
    parts.append(struct.pack("<H", len(raw)))
    parts.append(raw)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptFile(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")


def save_db(db: AffordanceDB, path: str | Path) -> None:
    parts: list[bytes] = [AFFDB_MAGIC, struct.pack("<H", AFFDB_VERSION), db.taxonomy.content_hash()]
    parts.append(
        struct.pack("<IIII", db.taxonomy.n_nouns, db.taxonomy.n_verbs, db.embed_dim, db.n_zones)
    )
    for name in db.taxonomy.noun_names:
        _write_str(parts, name)
    for name in db.taxonomy.verb_names:
        _write_str(parts, name)
    for zone in db.zones:
        parts.append(struct.pack("<I", zone.zone_id))
        parts.append(struct.pack("<H", len(zone.member_clip_ids)))
        for member in zone.member_clip_ids:
            _write_str(parts, member)
        parts.append(_pack_bitset(zone.noun_indicator))
        parts.append(_pack_bitset(zone.verb_indicator))
        has_text = zone.text_descriptor is not None
        parts.append(struct.pack("<B", 1 if has_text else 0))
        parts.append(zone.visual_descriptor.astype("<f4").tobytes())
        if has_text:
            parts.append(zone.text_descriptor.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_db(path: str | Path) -> AffordanceDB:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(len(AFFDB_MAGIC)) != AFFDB_MAGIC:
        raise CorruptFile(f"{path}: bad magic header")
    version = reader.u16()
    if version != AFFDB_VERSION:
        raise VersionMismatch(f"{path}: database version {version} != {AFFDB_VERSION}")
    stored_hash = reader.take(32)
    n_nouns, n_verbs, embed_dim, n_zones = struct.unpack("<IIII", reader.take(16))
    nouns = tuple(reader.string() for _ in range(n_nouns))
    verbs = tuple(reader.string() for _ in range(n_verbs))
    taxonomy = Taxonomy(noun_names=nouns, verb_names=verbs)
    if taxonomy.content_hash() != stored_hash:
        raise CorruptFile(f"{path}: taxonomy hash does not match stored names")

    zones = []
    for _ in range(n_zones):
        zone_id = reader.u32()
        members = tuple(reader.string() for _ in range(reader.u16()))
        noun_ind = _unpack_bitset(reader.take((n_nouns + 7) // 8), n_nouns)
        verb_ind = _unpack_bitset(reader.take((n_verbs + 7) // 8), n_verbs)
        flags = struct.unpack("<B", reader.take(1))[0]
        visual = np.frombuffer(reader.take(4 * embed_dim), dtype="<f4").astype(np.float32)
        text = None
        if flags & 1:
            text = np.frombuffer(reader.take(4 * embed_dim), dtype="<f4").astype(np.float32)
        zones.append(
            AffordanceZone(
                zone_id=zone_id,
                member_clip_ids=members,
                noun_indicator=noun_ind,
                verb_indicator=verb_ind,
                visual_descriptor=visual,
                text_descriptor=text,
            )
        )
    if reader.pos != len(reader.raw):
        raise CorruptFile(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")
    return AffordanceDB(taxonomy=taxonomy, zones=tuple(zones), embed_dim=embed_dim, version=version)
