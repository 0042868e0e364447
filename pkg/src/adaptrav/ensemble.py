"""Joint loss-similarity model selection over an ensemble of head experts.

Training cycles pick the head whose past training embeddings are nearest
to the incoming frames, spawning a copy of the most similar head when all
are too far (evicting the least recently trained head at capacity). A head
serves inference only if it is both similar to the recent frames and has
passed the usability gate (recent validation loss under a threshold);
otherwise the system falls back to the geometric LiDAR estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import ModelHead

REASON_OK = "similar-and-usable"
REASON_DISSIMILAR = "dissimilar"
REASON_NOT_USABLE = "not-usable"

SOURCE_HEAD = "head"
SOURCE_LIDAR = "lidar"


def cosine_distance(a, b):
    """1 - cos similarity of two unit vectors, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-9 or nb < 1e-9:
        raise ValueError("cosine distance of a zero vector is undefined")
    if abs(na - 1.0) > 1e-3 or abs(nb - 1.0) > 1e-3:
        raise ValueError("embeddings must be unit-norm")
    return float(np.clip(1.0 - a @ b, 0.0, 2.0))


def head_to_frames_distance(head: ModelHead, frame_embeddings):
    """Mean over frames of the min cosine distance to the head's history.

    Empty history -> +inf so such a head never wins over one with history.
    """
    if not head.embed_history:
        return float("inf")
    frames = np.atleast_2d(np.asarray(frame_embeddings, dtype=np.float64))
    hist = np.stack(head.embed_history)
    dists = 1.0 - frames @ hist.T
    return float(np.clip(dists, 0.0, 2.0).min(axis=1).mean())


@dataclass
class InferenceDecision:
    source: str            # SOURCE_HEAD or SOURCE_LIDAR
    head_id: int | None
    distance: float        # nearest-head distance over the recent frames
    reason: str

    def __post_init__(self):
        if self.reason not in (REASON_OK, REASON_DISSIMILAR, REASON_NOT_USABLE):
            raise ValueError(f"bad reason {self.reason!r}")
        if self.source == SOURCE_HEAD and self.head_id is None:
            raise ValueError("head decision needs a head id")

    @property
    def source_label(self):
        return f"head:{self.head_id}" if self.source == SOURCE_HEAD else SOURCE_LIDAR


@dataclass
class SelectionResult:
    head_id: int
    spawned: bool
    distance: float
    evicted_id: int | None = None
    source_id: int | None = None   # head whose weights were copied on spawn


class Ensemble:
    """Up to `capacity` specialized heads plus the selection thresholds."""

    def __init__(self, heads, capacity=5, cd_new=0.45, cd_lidar=0.75,
                 l_usable=6.0, usability_window=20.0):
        if not heads:
            raise ValueError("ensemble needs at least one head")
        if len(heads) > capacity:
            raise ValueError("more initial heads than capacity")
        self.heads = {h.head_id: h for h in heads}
        self.capacity = int(capacity)
        self.cd_new = float(cd_new)
        self.cd_lidar = float(cd_lidar)
        self.l_usable = float(l_usable)
        self.usability_window = float(usability_window)
        self.next_id = max(self.heads) + 1

    # ------------------------------------------------------------------
    def distances(self, frame_embeddings):
        return {hid: head_to_frames_distance(h, frame_embeddings)
                for hid, h in self.heads.items()}

    def _nearest(self, frame_embeddings):
        dists = self.distances(frame_embeddings)
        hid = min(dists, key=lambda k: (dists[k], k))
        return hid, dists[hid]

    def select_training_head(self, incoming_embeddings, now) -> SelectionResult:
        """Head to train on the incoming buffer, spawning/evicting as needed.

        Similarity is computed against the incoming frames' embeddings; a
        new head copies the weights of the most similar existing head, and
        the least recently trained head is discarded at capacity.
        """
        hid, dist = self._nearest(incoming_embeddings)
        if dist <= self.cd_new:
            return SelectionResult(hid, False, dist)
        if not np.isfinite(dist):
            # no head has history yet: keep training the most recent one
            hid = max(self.heads, key=lambda k: (self.heads[k].last_used, -k))
            return SelectionResult(hid, False, dist)
        evicted = None
        source = self.heads[hid]
        if len(self.heads) >= self.capacity:
            evicted = min(self.heads, key=lambda k: (self.heads[k].last_used, k))
            del self.heads[evicted]
        new = source.spawn(self.next_id, now)
        self.heads[new.head_id] = new
        self.next_id += 1
        return SelectionResult(new.head_id, True, dist, evicted, source.head_id)

    # ------------------------------------------------------------------
    def update_usability(self, head_id, now) -> bool:
        """Usable iff the mean validation loss inside the recent window is
        under the threshold; no records means not usable."""
        head = self.heads[head_id]
        recent = [v for t, v in head.loss_records
                  if now - self.usability_window <= t <= now]
        head.usable = bool(recent) and float(np.mean(recent)) < self.l_usable
        return head.usable

    def select_inference_source(self, recent_embeddings) -> InferenceDecision:
        """Per-frame source: nearest head if similar enough and usable,
        otherwise the LiDAR fallback."""
        hid, dist = self._nearest(recent_embeddings)
        if dist <= self.cd_lidar and self.heads[hid].usable:
            return InferenceDecision(SOURCE_HEAD, hid, dist, REASON_OK)
        if dist > self.cd_lidar:
            return InferenceDecision(SOURCE_LIDAR, None, dist, REASON_DISSIMILAR)
        return InferenceDecision(SOURCE_LIDAR, None, dist, REASON_NOT_USABLE)

    def replace_head(self, head_id, new_head):
        if head_id not in self.heads:
            raise KeyError(f"no head {head_id}")
        self.heads[head_id] = new_head


# ----------------------------------------------------------------------
# decision log: one line per inference frame, tab separated

DECISION_HEADER = "timestamp\tsource\tdistance\treason"


def decision_line(timestamp, decision: InferenceDecision):
    return (f"{timestamp:.6f}\t{decision.source_label}\t"
            f"{decision.distance:.6f}\t{decision.reason}")


def parse_decision_log(lines):
    """Parse decision-log lines into dict records (skips the header)."""
    out = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("timestamp"):
            continue
        ts, source, dist, reason = line.split("\t")
        out.append({"timestamp": float(ts), "source": source,
                    "distance": float(dist), "reason": reason})
    return out
