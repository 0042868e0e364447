"""Frozen deterministic encoder and trainable per-pixel cost-regression heads.

The encoder is a fixed-seed random projection of per-patch image statistics
(mean color, contrast, gradient energy, vertical position) through a tanh;
it is shared, immutable, and gives every frame a unit-norm global embedding
used for novelty and model selection. Heads regress patch features to a
scalar cost and train online with a masked, class-frequency-weighted MSE
on self-labeled pixels only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import HIGH, LOW, MEDIUM, discretize

COST_CLIP = (0.0, 10.0)


class NoLabeledPixels(ValueError):
    """Raised when an operation needs labeled pixels and none exist."""


@dataclass
class EncoderConfig:
    width: int = 160
    height: int = 120
    patch: int = 4
    feature_dim: int = 16
    embed_dim: int = 32
    seed: int = 1234
    proj_scale: float = 0.8
    # relative weights of the patch statistics; chroma and texture dominate
    # so appearance changes and sensor corruption move the embedding far
    # while global brightness alone does not
    chroma_gain: float = 2.5
    lum_gain: float = 2.2
    contrast_gain: float = 3.5
    grad_gain: float = 3.0
    # embedding centering reference: typical outdoor statistics, so blank
    # or corrupted frames point away from any textured scene
    ref_lum: float = 0.40
    ref_contrast: float = 0.045
    ref_grad: float = 0.047


@dataclass
class EncodedFrame:
    patch_features: np.ndarray   # (Hp, Wp, F) float32
    embedding: np.ndarray        # (E,) float64, unit norm
    timestamp: float
    patch: int
    image_shape: tuple


class Encoder:
    """Deterministic patch-statistics encoder (stands in for a frozen backbone).

    The global embedding pools the patch features and subtracts the
    encoder's fixed response to a neutral gray scene, so frame-independent
    components (vertical position, tanh offsets) cancel and the embedding
    direction reflects appearance only.
    """

    N_STATS = 7

    def __init__(self, config: EncoderConfig = None):
        self.config = config or EncoderConfig()
        c = self.config
        if c.height % c.patch or c.width % c.patch:
            raise ValueError("image size must be a multiple of the patch size")
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0xE0C]))
        self.proj = rng.normal(0.0, c.proj_scale, size=(c.feature_dim, self.N_STATS))
        self.embed_proj = rng.normal(0.0, 1.0 / np.sqrt(3 * c.feature_dim),
                                     size=(c.embed_dim, 3 * c.feature_dim))
        ref = np.zeros((c.height // c.patch, c.width // c.patch, self.N_STATS))
        ref[..., 3] = c.lum_gain * (c.ref_lum - 0.5)
        ref[..., 4] = c.contrast_gain * c.ref_contrast
        ref[..., 5] = c.grad_gain * c.ref_grad
        ref[..., 6] = self._vpos()
        self._ref_pool = self._band_pool(np.tanh(ref @ self.proj.T))

    def _vpos(self):
        c = self.config
        hp, wp = c.height // c.patch, c.width // c.patch
        v = (np.arange(hp) + 0.5) * c.patch / c.height - 0.5
        return np.broadcast_to(v[:, None], (hp, wp))

    @staticmethod
    def _band_pool(feats):
        """Mean patch feature per image-third (sky / horizon / near bands),
        concatenated; keeps terrain appearance from being washed out by sky."""
        hp = feats.shape[0]
        b1, b2 = hp // 3, 2 * hp // 3
        return np.concatenate([feats[:b1].mean(axis=(0, 1)),
                               feats[b1:b2].mean(axis=(0, 1)),
                               feats[b2:].mean(axis=(0, 1))])

    def patch_statistics(self, image):
        """Per-patch stats: chroma (RGB minus luminance), centered
        luminance, contrast, gradient energy, vertical position."""
        c = self.config
        img = np.asarray(image)
        if img.shape != (c.height, c.width, 3):
            raise ValueError(
                f"expected {(c.height, c.width, 3)} image, got {img.shape}")
        im = img.astype(np.float64) / 255.0
        hp, wp = c.height // c.patch, c.width // c.patch
        blocks = im.reshape(hp, c.patch, wp, c.patch, 3)
        mean = blocks.mean(axis=(1, 3))
        lum_mean = mean.mean(axis=-1, keepdims=True)
        chroma = c.chroma_gain * (mean - lum_mean)
        contrast = c.contrast_gain * np.sqrt(blocks.var(axis=(1, 3)).mean(axis=-1))

        lum = im.mean(axis=-1)
        gx = np.zeros_like(lum)
        gy = np.zeros_like(lum)
        gx[:, :-1] = np.abs(np.diff(lum, axis=1))
        gy[:-1, :] = np.abs(np.diff(lum, axis=0))
        grad = (gx + gy).reshape(hp, c.patch, wp, c.patch).mean(axis=(1, 3)) \
            * c.grad_gain

        return np.concatenate([
            chroma,
            c.lum_gain * (lum_mean - 0.5),
            contrast[..., None],
            grad[..., None],
            self._vpos()[..., None],
        ], axis=-1)

    def encode(self, image, timestamp=0.0) -> EncodedFrame:
        stats = self.patch_statistics(image)
        feats = np.tanh(stats @ self.proj.T)
        raw = self.embed_proj @ (self._band_pool(feats) - self._ref_pool)
        norm = np.linalg.norm(raw)
        if norm < 1e-9:
            emb = np.zeros(self.config.embed_dim)
            emb[0] = 1.0
        else:
            emb = raw / norm
        return EncodedFrame(feats.astype(np.float32), emb, float(timestamp),
                            self.config.patch,
                            (self.config.height, self.config.width))


def class_weights(label_arrays):
    """Median-frequency class weights from one or more label masks.

    Pixels are bucketed by the evaluation class thresholds; classes absent
    from the labels get weight zero.
    """
    counts = np.zeros(3, dtype=np.int64)
    for labels in label_arrays:
        cls = discretize(labels)
        for c in (LOW, MEDIUM, HIGH):
            counts[c] += int((cls == c).sum())
    total = counts.sum()
    if total == 0:
        raise NoLabeledPixels("no labeled pixels to weight")
    freqs = counts / total
    present = counts > 0
    med = float(np.median(freqs[present]))
    w = np.zeros(3)
    w[present] = med / freqs[present]
    return w


@dataclass
class BufferFrame:
    """One self-labeled training example: encoded image plus its label mask."""
    encoded: EncodedFrame
    labels: np.ndarray  # (H, W) float32, NaN where unlabeled
    image_ts: float


@dataclass
class TrainingBuffer:
    train_frames: list
    val_frames: list
    window: tuple          # nominal (t0, t1) of the collection window
    ready_ts: float
    n_train: int = 10
    n_val: int = 4

    def __post_init__(self):
        if len(self.train_frames) != self.n_train or len(self.val_frames) != self.n_val:
            raise ValueError(
                f"buffer needs exactly {self.n_train}+{self.n_val} frames, got "
                f"{len(self.train_frames)}+{len(self.val_frames)}")
        train_ids = {id(f) for f in self.train_frames}
        if any(id(f) in train_ids for f in self.val_frames):
            raise ValueError("validation frames must be disjoint from training frames")


class ModelHead:
    """Trainable cost regressor atop the frozen encoder, plus selection state."""

    def __init__(self, head_id, feature_dim, kind="linear", hidden_dim=32,
                 history_cap=32, init_seed=0):
        self.head_id = int(head_id)
        self.kind = kind
        self.history_cap = int(history_cap)
        self.embed_history = []
        self.usable = False
        self.loss_records = []   # (timestamp, validation loss)
        self.last_used = -np.inf
        self.trained_count = 0
        if kind == "linear":
            self.params = {"w": np.zeros(feature_dim), "b": np.zeros(1)}
        elif kind == "mlp":
            rng = np.random.default_rng(np.random.SeedSequence([init_seed, 0xF00D]))
            self.params = {
                "w1": rng.normal(0, 0.3, size=(hidden_dim, feature_dim)),
                "b1": np.zeros(hidden_dim),
                "w2": rng.normal(0, 0.3, size=hidden_dim),
                "b2": np.zeros(1),
            }
        else:
            raise ValueError(f"unknown head kind {kind!r}")

    # ------------------------------------------------------------------
    def copy(self, head_id=None):
        out = ModelHead.__new__(ModelHead)
        out.head_id = self.head_id if head_id is None else int(head_id)
        out.kind = self.kind
        out.history_cap = self.history_cap
        out.embed_history = [e.copy() for e in self.embed_history]
        out.usable = self.usable
        out.loss_records = list(self.loss_records)
        out.last_used = self.last_used
        out.trained_count = self.trained_count
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def spawn(self, head_id, now):
        """Fresh head with copied weights only (no history, not usable)."""
        out = self.copy(head_id=head_id)
        out.embed_history = []
        out.usable = False
        out.loss_records = []
        out.last_used = now
        out.trained_count = 0
        return out

    def record_history(self, embeddings):
        self.embed_history.extend(np.asarray(e, dtype=np.float64) for e in embeddings)
        if len(self.embed_history) > self.history_cap:
            self.embed_history = self.embed_history[-self.history_cap:]

    # ------------------------------------------------------------------
    def predict_patches(self, encoded: EncodedFrame):
        f = encoded.patch_features.astype(np.float64)
        if self.kind == "linear":
            return f @ self.params["w"] + self.params["b"][0]
        hidden = np.tanh(f @ self.params["w1"].T + self.params["b1"])
        return hidden @ self.params["w2"] + self.params["b2"][0]

    def predict(self, encoded: EncodedFrame):
        """Pixel-resolution cost image, clamped to [0, 10]; bottom half NaN
        (the model only serves the long-range top half)."""
        pred = np.clip(self.predict_patches(encoded), *COST_CLIP)
        p = encoded.patch
        h, w = encoded.image_shape
        img = np.repeat(np.repeat(pred, p, axis=0), p, axis=1).astype(np.float32)
        img[h // 2:, :] = np.nan
        return img


# ----------------------------------------------------------------------
# masked weighted MSE and its gradient

def patch_label_stats(labels, weights, patch):
    """Per-patch sufficient statistics (sum w, sum w*y, sum w*y^2) of the
    labeled pixels, so the loss in a patch is A*p^2 - 2*B*p + C."""
    lab = np.asarray(labels, dtype=np.float64)
    cls = discretize(lab)
    w = np.zeros(lab.shape)
    for c in (LOW, MEDIUM, HIGH):
        w[cls == c] = weights[c]
    y = np.where(np.isfinite(lab), lab, 0.0)
    hp, wp = lab.shape[0] // patch, lab.shape[1] // patch

    def pool(a):
        return a.reshape(hp, patch, wp, patch).sum(axis=(1, 3))

    return pool(w), pool(w * y), pool(w * y * y)


def frame_loss_and_grad(head: ModelHead, encoded: EncodedFrame, stats):
    """Weighted masked MSE over one frame and its parameter gradient."""
    a, b, c = stats
    total = a.sum()
    if total <= 0:
        return None, None
    pred = head.predict_patches(encoded)
    loss = float((a * pred * pred - 2.0 * b * pred + c).sum() / total)
    dpred = (2.0 * a * pred - 2.0 * b) / total
    f = encoded.patch_features.astype(np.float64)
    if head.kind == "linear":
        grads = {
            "w": np.einsum("ij,ijf->f", dpred, f),
            "b": np.array([dpred.sum()]),
        }
    else:
        pre = f @ head.params["w1"].T + head.params["b1"]
        hidden = np.tanh(pre)
        grads = {"w2": np.einsum("ij,ijh->h", dpred, hidden),
                 "b2": np.array([dpred.sum()])}
        dh = dpred[..., None] * head.params["w2"] * (1.0 - hidden * hidden)
        grads["w1"] = np.einsum("ijh,ijf->hf", dh, f)
        grads["b1"] = dh.sum(axis=(0, 1))
    return loss, grads


def buffer_loss(head: ModelHead, frames, weights, patch):
    """Mean per-frame weighted masked MSE over a list of BufferFrames."""
    losses = []
    for fr in frames:
        stats = patch_label_stats(fr.labels, weights, patch)
        loss, _ = frame_loss_and_grad(head, fr.encoded, stats)
        if loss is not None:
            losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def train_head(head: ModelHead, buffer: TrainingBuffer, now,
               lr=3e-3, epochs=400, weights=None):
    """SGD on the weighted masked MSE over the buffer's training frames.

    Returns (trained head copy, train loss, validation loss); the input head
    is not mutated so inference can keep serving the pre-cycle snapshot.
    """
    if weights is None:
        weights = class_weights([f.labels for f in buffer.train_frames])
    patch = buffer.train_frames[0].encoded.patch
    prepared = []
    for fr in buffer.train_frames:
        stats = patch_label_stats(fr.labels, weights, patch)
        if stats[0].sum() > 0:
            prepared.append((fr, stats))
    if not prepared:
        raise NoLabeledPixels("buffer has no labeled pixels")

    out = head.copy()
    for _ in range(int(epochs)):
        for fr, stats in prepared:
            _, grads = frame_loss_and_grad(out, fr.encoded, stats)
            for k, g in grads.items():
                out.params[k] -= lr * g

    train_loss = buffer_loss(out, [fr for fr, _ in prepared], weights, patch)
    val_loss = buffer_loss(out, buffer.val_frames, weights, patch)
    out.record_history([fr.encoded.embedding for fr in buffer.train_frames])
    if np.isfinite(val_loss):
        out.loss_records.append((float(now), float(val_loss)))
        out.loss_records = [(t, v) for t, v in out.loss_records if t >= now - 60.0]
    out.last_used = float(now)
    out.trained_count += 1
    return out, train_loss, val_loss


# ----------------------------------------------------------------------
# flat parameter vector helpers (finite-difference checks, checkpoints)

def get_param_vector(head: ModelHead):
    return np.concatenate([head.params[k].ravel() for k in sorted(head.params)])


def set_param_vector(head: ModelHead, vec):
    off = 0
    for k in sorted(head.params):
        size = head.params[k].size
        head.params[k] = np.asarray(vec[off:off + size]).reshape(head.params[k].shape).copy()
        off += size


def save_head(head: ModelHead, path):
    """Checkpoint: parameter arrays, embedding history, flags (npz)."""
    arrays = {f"param_{k}": v for k, v in head.params.items()}
    arrays["embed_history"] = (np.stack(head.embed_history)
                               if head.embed_history else np.zeros((0, 1)))
    arrays["loss_records"] = (np.array(head.loss_records)
                              if head.loss_records else np.zeros((0, 2)))
    arrays["meta"] = np.array([head.head_id, float(head.usable), head.last_used,
                               head.trained_count, head.history_cap])
    arrays["kind"] = np.array(head.kind)
    np.savez(path, **arrays)


def load_head(path):
    data = np.load(path, allow_pickle=False)
    meta = data["meta"]
    kind = str(data["kind"])
    params = {k[len("param_"):]: data[k] for k in data.files if k.startswith("param_")}
    feature_dim = params["w"].shape[0] if kind == "linear" else params["w1"].shape[1]
    head = ModelHead(int(meta[0]), feature_dim, kind=kind,
                     history_cap=int(meta[4]))
    head.params = params
    hist = data["embed_history"]
    head.embed_history = [hist[i].copy() for i in range(hist.shape[0])] \
        if hist.shape[1] > 1 else []
    head.loss_records = [(float(t), float(v)) for t, v in data["loss_records"]]
    head.usable = bool(meta[1])
    head.last_used = float(meta[2])
    head.trained_count = int(meta[3])
    return head
