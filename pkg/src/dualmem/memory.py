"""The dual memory: classifier slots for known concepts, centroid slots for candidates.

Semantic slots carry a closed-form discriminant refreshed on every update;
working slots are cumulative-moving-average centroids matched by cosine.
Retrieval is a pure decision; applying a decision is the only mutation path.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import Config, config_hash
from .records import RegionRecord
from .stats import BackgroundStats, LinearClassifier, train_lda

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DMCK"
CHECKPOINT_VERSION = 1


class StaleDecisionError(RuntimeError):
    """A decision references a slot that no longer exists."""


class DecisionKind(enum.Enum):
    KNOWN_MATCH = "known_match"
    WORKING_MATCH = "working_match"
    NEW_SLOT = "new_slot"
    REJECTED = "rejected"


@dataclass(frozen=True)
class RetrievalDecision:
    kind: DecisionKind
    slot_id: int | None
    score: float


@dataclass(eq=False)
class SemanticSlot:
    """A known or discovered category: positive mean, count, derived classifier."""

    slot_id: int
    label: str
    mean: np.ndarray
    count: int
    classifier: LinearClassifier
    members: list[str] = field(default_factory=list)


@dataclass(eq=False)
class WorkingSlot:
    """A candidate category: running centroid over its member features."""

    slot_id: int
    centroid: np.ndarray
    count: int
    members: list[str] = field(default_factory=list)


class DualMemory:
    """Single-writer store of semantic and working slots plus shared background stats.

    Slot lists stay sorted by slot_id, so argmax ties resolve to the oldest slot.
    Parallel score matrices mirror the lists for O(slots * d) retrieval.
    """

    def __init__(self, bg: BackgroundStats, config: Config):
        if bg.d != config.d:
            raise ValueError(f"background dimension {bg.d} != configured dimension {config.d}")
        self.bg = bg
        self.config = config
        self.semantic: list[SemanticSlot] = []
        self.working: list[WorkingSlot] = []
        self.sample_store: dict[str, np.ndarray] = {}
        self.image_of: dict[str, str] = {}
        self.next_slot_id = 0
        self.rejected_count = 0
        self._sem_w = np.zeros((0, config.d))
        self._sem_b = np.zeros(0)
        self._work_mu = np.zeros((0, config.d))
        self._work_norm = np.zeros(0)
        self._sem_rows: dict[int, int] = {}
        self._work_rows: dict[int, int] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(
        cls,
        bg: BackgroundStats,
        config: Config,
        priors: dict[str, list[RegionRecord]] | None = None,
    ) -> "DualMemory":
        """Seed semantic memory with one slot per prior class; working memory starts empty.

        ``priors`` maps class label to its prior regions. Classes with no
        qualifying priors are skipped with a warning.
        """
        mem = cls(bg, config)
        if priors and len(priors) > config.slot_cap:
            raise ValueError(
                f"{len(priors)} prior classes exceed the slot cap {config.slot_cap}"
            )
        for label in sorted(priors or {}):
            regions = priors[label]
            if not regions:
                logger.warning("class '%s' has no qualifying priors; skipping", label)
                continue
            feats = np.stack([r.feature for r in regions])
            mean = feats.mean(axis=0)
            count = len(regions)
            slot = SemanticSlot(
                slot_id=mem.next_slot_id,
                label=label,
                mean=mean,
                count=count,
                classifier=train_lda(mean, count, bg),
                members=[r.region_id for r in regions],
            )
            mem.next_slot_id += 1
            mem.semantic.append(slot)
            for r in regions:
                mem.sample_store[r.region_id] = r.feature
                mem.image_of[r.region_id] = r.image_id
        mem.rebuild_caches()
        return mem

    @property
    def total_slots(self) -> int:
        return len(self.semantic) + len(self.working)

    def rebuild_caches(self) -> None:
        """Recompute the stacked score matrices from the slot lists."""
        d = self.config.d
        if self.semantic:
            self._sem_w = np.stack([s.classifier.weights for s in self.semantic])
            self._sem_b = np.array([s.classifier.bias for s in self.semantic])
        else:
            self._sem_w = np.zeros((0, d))
            self._sem_b = np.zeros(0)
        if self.working:
            self._work_mu = np.stack([s.centroid for s in self.working])
            self._work_norm = np.linalg.norm(self._work_mu, axis=1)
        else:
            self._work_mu = np.zeros((0, d))
            self._work_norm = np.zeros(0)
        self._sem_rows = {s.slot_id: i for i, s in enumerate(self.semantic)}
        self._work_rows = {s.slot_id: i for i, s in enumerate(self.working)}

    # -- retrieval ----------------------------------------------------------

    def _validated(self, feature: np.ndarray) -> np.ndarray:
        f = np.asarray(feature, dtype=np.float64)
        if f.shape != (self.config.d,):
            raise ValueError(f"feature has shape {f.shape}, expected ({self.config.d},)")
        if not np.all(np.isfinite(f)):
            raise ValueError("feature contains non-finite values")
        return f

    def retrieve(self, feature: np.ndarray) -> RetrievalDecision:
        """Decide where a region belongs. Pure: the memory is not touched.

        Semantic memory is consulted first by classifier score, then working
        memory by cosine; a miss on both creates a slot unless the cap is hit.
        """
        f = self._validated(feature)
        cfg = self.config
        if self.semantic:
            scores = self._sem_w @ f + self._sem_b
            best = int(np.argmax(scores))
            if scores[best] >= cfg.tau_semantic:
                return RetrievalDecision(
                    DecisionKind.KNOWN_MATCH, self.semantic[best].slot_id, float(scores[best])
                )
        best_cos = -1.0
        if self.working:
            f_norm = float(np.linalg.norm(f))
            denom = self._work_norm * f_norm
            raw = self._work_mu @ f
            if np.any(denom == 0.0):
                logger.warning("degenerate zero-norm centroid or feature during retrieval")
            sims = np.where(denom > 0.0, raw / np.where(denom > 0.0, denom, 1.0), 0.0)
            sims = np.clip(sims, -1.0, 1.0)
            best = int(np.argmax(sims))
            best_cos = float(sims[best])
            if best_cos >= cfg.tau_working:
                return RetrievalDecision(
                    DecisionKind.WORKING_MATCH, self.working[best].slot_id, best_cos
                )
        if self.total_slots >= cfg.slot_cap:
            return RetrievalDecision(DecisionKind.REJECTED, None, best_cos)
        return RetrievalDecision(DecisionKind.NEW_SLOT, None, best_cos)

    # -- updates ------------------------------------------------------------

    def _register_sample(self, region: RegionRecord) -> None:
        self.sample_store[region.region_id] = region.feature
        self.image_of[region.region_id] = region.image_id

    def _update_semantic_slot(self, slot_id: int, region: RegionRecord) -> None:
        row = self._sem_rows.get(slot_id)
        if row is None:
            raise StaleDecisionError(f"semantic slot {slot_id} no longer exists")
        slot = self.semantic[row]
        slot.mean = slot.mean + (region.feature - slot.mean) / (slot.count + 1)
        slot.count += 1
        slot.classifier = train_lda(slot.mean, slot.count, self.bg)
        slot.members.append(region.region_id)
        self._sem_w[row] = slot.classifier.weights
        self._sem_b[row] = slot.classifier.bias
        self._register_sample(region)

    def apply_decision(self, decision: RetrievalDecision, region: RegionRecord) -> None:
        """Mutate the memory according to a decision produced by :meth:`retrieve`."""
        if decision.kind is DecisionKind.KNOWN_MATCH:
            self._update_semantic_slot(decision.slot_id, region)
        elif decision.kind is DecisionKind.WORKING_MATCH:
            row = self._work_rows.get(decision.slot_id)
            if row is None:
                raise StaleDecisionError(f"working slot {decision.slot_id} no longer exists")
            slot = self.working[row]
            slot.centroid = slot.centroid + (region.feature - slot.centroid) / (slot.count + 1)
            slot.count += 1
            slot.members.append(region.region_id)
            self._work_mu[row] = slot.centroid
            self._work_norm[row] = np.linalg.norm(slot.centroid)
            self._register_sample(region)
        elif decision.kind is DecisionKind.NEW_SLOT:
            slot = WorkingSlot(
                slot_id=self.next_slot_id,
                centroid=region.feature.copy(),
                count=1,
                members=[region.region_id],
            )
            self.next_slot_id += 1
            self.working.append(slot)
            self._work_mu = np.vstack([self._work_mu, slot.centroid[None, :]])
            self._work_norm = np.append(self._work_norm, np.linalg.norm(slot.centroid))
            self._work_rows[slot.slot_id] = len(self.working) - 1
            self._register_sample(region)
        elif decision.kind is DecisionKind.REJECTED:
            self.rejected_count += 1
        else:  # pragma: no cover - exhaustive enum
            raise ValueError(f"unknown decision kind {decision.kind}")

    def process_image(self, batch: Sequence[RegionRecord]) -> list[RetrievalDecision]:
        """Retrieve-then-apply each region in batch order.

        Later regions of the same image see the updates made by earlier ones.
        """
        decisions = []
        for region in batch:
            decision = self.retrieve(region.feature)
            self.apply_decision(decision, region)
            decisions.append(decision)
        return decisions

    def mine_region(self, region: RegionRecord) -> bool:
        """Validation-phase matching: accept into semantic memory only, never create slots."""
        if not self.semantic:
            return False
        f = self._validated(region.feature)
        scores = self._sem_w @ f + self._sem_b
        best = int(np.argmax(scores))
        if scores[best] < self.config.tau_semantic:
            return False
        self._update_semantic_slot(self.semantic[best].slot_id, region)
        return True

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        """Binary dump sufficient to reproduce every subsequent decision."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.config.d))
            fh.write(bytes.fromhex(config_hash(self.config)))
            fh.write(struct.pack("<QQ", self.next_slot_id, self.rejected_count))
            fh.write(self.bg.mean.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.bg.covariance, dtype="<f8").tobytes())
            fh.write(struct.pack("<Q", self.bg.count))
            fh.write(struct.pack("<I", len(self.semantic)))
            for slot in self.semantic:
                fh.write(struct.pack("<Q", slot.slot_id))
                _write_str(fh, slot.label)
                fh.write(struct.pack("<Q", slot.count))
                fh.write(slot.mean.astype("<f8").tobytes())
                fh.write(slot.classifier.weights.astype("<f8").tobytes())
                fh.write(struct.pack("<d", slot.classifier.bias))
                _write_str_list(fh, slot.members)
            fh.write(struct.pack("<I", len(self.working)))
            for slot in self.working:
                fh.write(struct.pack("<Q", slot.slot_id))
                fh.write(struct.pack("<Q", slot.count))
                fh.write(slot.centroid.astype("<f8").tobytes())
                _write_str_list(fh, slot.members)
                unique = list(dict.fromkeys(slot.members))
                fh.write(struct.pack("<I", len(unique)))
                for rid in unique:
                    _write_str(fh, rid)
                    _write_str(fh, self.image_of[rid])
                    fh.write(self.sample_store[rid].astype("<f8").tobytes())

    @classmethod
    def load_checkpoint(cls, path: str | Path, config: Config) -> "DualMemory":
        with open(path, "rb") as fh:
            magic, version, d = struct.unpack("<4sII", fh.read(12))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad magic {magic!r} in checkpoint")
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            stored_hash = fh.read(32).hex()
            if stored_hash != config_hash(config):
                raise ValueError("checkpoint was written under a different configuration")
            if d != config.d:
                raise ValueError(f"checkpoint dimension {d} != configured dimension {config.d}")
            next_slot_id, rejected = struct.unpack("<QQ", fh.read(16))
            bg_mean = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
            bg_cov = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
            (bg_count,) = struct.unpack("<Q", fh.read(8))
            bg = BackgroundStats.from_moments(bg_mean, bg_cov, bg_count)
            mem = cls(bg, config)
            mem.next_slot_id = next_slot_id
            mem.rejected_count = rejected
            (n_sem,) = struct.unpack("<I", fh.read(4))
            for _ in range(n_sem):
                (slot_id,) = struct.unpack("<Q", fh.read(8))
                label = _read_str(fh)
                (count,) = struct.unpack("<Q", fh.read(8))
                mean = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
                weights = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
                (bias,) = struct.unpack("<d", fh.read(8))
                members = _read_str_list(fh)
                mem.semantic.append(
                    SemanticSlot(slot_id, label, mean, count, LinearClassifier(weights, bias), members)
                )
            (n_work,) = struct.unpack("<I", fh.read(4))
            for _ in range(n_work):
                slot_id, count = struct.unpack("<QQ", fh.read(16))
                centroid = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
                members = _read_str_list(fh)
                mem.working.append(WorkingSlot(slot_id, centroid, count, members))
                (n_samples,) = struct.unpack("<I", fh.read(4))
                for _ in range(n_samples):
                    rid = _read_str(fh)
                    image_id = _read_str(fh)
                    feature = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
                    mem.sample_store[rid] = feature
                    mem.image_of[rid] = image_id
        mem.rebuild_caches()
        return mem


def _write_str(fh, value: str) -> None:
    raw = value.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_str_list(fh, values: Iterable[str]) -> None:
    values = list(values)
    fh.write(struct.pack("<I", len(values)))
    for v in values:
        _write_str(fh, v)


def _read_str_list(fh) -> list[str]:
    (n,) = struct.unpack("<I", fh.read(4))
    return [_read_str(fh) for _ in range(n)]
