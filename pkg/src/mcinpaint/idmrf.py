"""Diversified neural-patch matching loss (ID-MRF style).

Feature maps of the generated and reference images are cut into small
patch vectors.  For each generated patch v and reference patch s, the
cosine similarity is rescored *relative to v's best competing reference*
(excluding s itself), exponentiated, and normalized over references.  The
per-layer loss is the negative log of the average best match each
reference patch receives, so it rewards one-to-one matching and penalizes
many generated patches collapsing onto a single reference patch.

Evaluation runs in a shift-stabilized log domain: the per-row maximum of
the logits is subtracted before exponentiation, which leaves the
normalized scores mathematically unchanged but avoids overflow for
adversarial similarity matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mcinpaint import autodiff as ad
from mcinpaint.autodiff import ConvSpec, Tensor4


class IdMrfError(ValueError):
    pass


@dataclass(frozen=True)
class IdMrfConfig:
    """Knobs of the patch-matching loss.

    ``bandwidth`` and ``epsilon`` must be positive; ``layer_weights`` maps
    backbone layer names to their multiplicity in the combined loss (the
    default counts the deep semantic layer twice and the texture layer once).
    """

    bandwidth: float = 0.5
    epsilon: float = 1e-5
    patch_size: int = 3
    patch_stride: int = 1
    norm_guard: float = 1e-8
    layer_weights: dict = field(default_factory=lambda: {"conv4_2": 2.0, "conv3_2": 1.0})

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise IdMrfError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.epsilon <= 0:
            raise IdMrfError(f"epsilon must be positive, got {self.epsilon}")
        if self.patch_size < 1 or self.patch_stride < 1:
            raise IdMrfError("patch size and stride must be >= 1")
        if self.norm_guard <= 0:
            raise IdMrfError("norm_guard must be positive")


@dataclass
class PatchSet:
    """Unit-normalizable patch vectors from one feature map layer."""

    vectors: Tensor4          # (1, count, k*k*c, 1)
    patch_size: int
    stride: int
    count: int
    layer: str = ""


# ---------------------------------------------------------------- backbone

# layer name -> cumulative spatial stride of its output
LAYER_REGISTRY = {"conv3_2": 4, "conv4_2": 8}

_BACKBONE_LAYOUT = (
    # name, stride, channel stage index
    ("conv1_1", 1, 0),
    ("conv1_2", 1, 0),
    ("conv2_1", 2, 1),
    ("conv2_2", 1, 1),
    ("conv3_1", 2, 2),
    ("conv3_2", 1, 2),
    ("conv4_1", 2, 3),
    ("conv4_2", 1, 3),
)

DEFAULT_BACKBONE_SEED = 41
DEFAULT_BACKBONE_CHANNELS = (8, 16, 32, 48)


class FeatureBackbone:
    """Fixed-weight convolutional stack with named feature taps.

    Weights are frozen (never trained) and deterministic for a seed, so
    identical inputs always produce bit-identical features.  Gradients
    still flow *through* the stack into the image being scored.
    """

    def __init__(self, layers):
        # layers: ordered list of (name, ConvSpec, weight Tensor4, bias Tensor4)
        self.layers = list(layers)
        names = [name for name, _, _, _ in self.layers]
        if names != [n for n, _, _ in _BACKBONE_LAYOUT]:
            raise IdMrfError(f"unexpected backbone layout {names}")

    @classmethod
    def make(cls, seed: int = DEFAULT_BACKBONE_SEED, in_channels: int = 3,
             channels=DEFAULT_BACKBONE_CHANNELS, dtype=np.float32):
        rng = np.random.default_rng(seed)
        layers = []
        prev = in_channels
        for name, stride, stage in _BACKBONE_LAYOUT:
            c_out = channels[stage]
            spec = ConvSpec(3, 3, prev, c_out, stride=(stride, stride), padding="same")
            fan_in = 3 * 3 * prev
            w = rng.standard_normal((3, 3, prev, c_out)) / np.sqrt(fan_in)
            layers.append((name, spec,
                           Tensor4(w.astype(dtype)),
                           Tensor4(np.zeros((1, 1, 1, c_out), dtype=dtype))))
            prev = c_out
        return cls(layers)

    @property
    def dtype(self):
        return self.layers[0][2].dtype

    def astype(self, dtype) -> "FeatureBackbone":
        return FeatureBackbone([
            (name, spec, Tensor4(w.data.astype(dtype)), Tensor4(b.data.astype(dtype)))
            for name, spec, w, b in self.layers])

    def state_arrays(self) -> dict:
        out = {}
        for name, _, w, b in self.layers:
            out[f"backbone.{name}.weight"] = w.data
            out[f"backbone.{name}.bias"] = b.data
        return out

    @classmethod
    def from_state(cls, state: dict, dtype=np.float32):
        layers = []
        for name, stride, _ in _BACKBONE_LAYOUT:
            w = state[f"backbone.{name}.weight"].astype(dtype)
            b = state[f"backbone.{name}.bias"].astype(dtype)
            kh, kw, c_in, c_out = w.shape
            spec = ConvSpec(kh, kw, c_in, c_out, stride=(stride, stride), padding="same")
            layers.append((name, spec, Tensor4(w), Tensor4(b)))
        return cls(layers)

    def features(self, image: Tensor4, layer_names) -> dict:
        for layer in layer_names:
            if layer not in LAYER_REGISTRY:
                raise IdMrfError(f"unknown backbone layer {layer!r}; "
                                 f"known: {sorted(LAYER_REGISTRY)}")
        wanted = set(layer_names)
        out = {}
        x = image
        for name, spec, w, b in self.layers:
            x = ad.tanh(ad.conv2d(x, spec, w, b))
            if name in wanted:
                out[name] = x
            if len(out) == len(wanted):
                break
        return out


def extract_features(image: Tensor4, backbone: FeatureBackbone, layers) -> dict:
    if image.dtype != backbone.dtype:
        raise ad.ShapeError(f"image dtype {image.dtype} does not match backbone "
                            f"dtype {backbone.dtype}")
    return backbone.features(image, layers)


# ---------------------------------------------------------------- patches


def extract_patches(feat: Tensor4, patch_size: int, stride: int, layer: str = "") -> PatchSet:
    """All valid k-by-k windows of a single feature map, in raster order."""
    n, h, w, c = feat.dims
    if n != 1:
        raise IdMrfError(f"extract_patches expects a single feature map, got batch {n}")
    k = patch_size
    if k > h or k > w:
        raise IdMrfError(f"patch size {k} exceeds feature dims {(h, w)}")
    ys = np.arange(0, h - k + 1, stride)
    xs = np.arange(0, w - k + 1, stride)
    ky = np.arange(k)
    kx = np.arange(k)
    rows = ys[:, None, None, None] + ky[None, None, :, None]
    cols = xs[None, :, None, None] + kx[None, None, None, :]
    cell = rows * w + cols                                   # wy,wx,ky,kx
    idx = (cell[..., None] * c + np.arange(c)).reshape(len(ys) * len(xs), k * k * c)
    count = idx.shape[0]
    vectors = ad.gather_flat(feat, idx, (1, count, k * k * c, 1))
    return PatchSet(vectors=vectors, patch_size=k, stride=stride, count=count, layer=layer)


def cosine_similarity_matrix(gen: PatchSet, ref: PatchSet, norm_guard: float = 1e-8) -> Tensor4:
    """Pairwise cosine similarities, (1, gen.count, ref.count, 1)."""
    if gen.vectors.dims[2] != ref.vectors.dims[2]:
        raise IdMrfError(f"patch vector lengths differ: {gen.vectors.dims[2]} "
                         f"vs {ref.vectors.dims[2]}")

    def normalize(ps):
        norms = ad.maximum_scalar(ad.sqrt(ad.sum_axis(ad.square(ps.vectors), 2)), norm_guard)
        return ad.div(ps.vectors, norms)

    return ad.matmul(normalize(gen), ad.transpose_hw(normalize(ref)))


# ---------------------------------------------------------------- similarity


def relative_similarity(mu: Tensor4, config: IdMrfConfig):
    """Exclusion-normalized relative similarity.

    Returns (logits, normalized) where logits[v, s] is the ratio of
    mu[v, s] to v's best similarity among the other reference patches
    (plus epsilon), divided by the bandwidth, and ``normalized`` is its
    exponential normalization over s for each v (rows sum to 1).
    """
    _, p_gen, p_ref, _ = mu.dims
    if p_ref < 2:
        raise IdMrfError(f"need at least 2 reference patches to score against "
                         f"competitors, got {p_ref}")
    data = mu.data[:, :, :, 0][0]                      # (p_gen, p_ref)
    top = np.argmax(data, axis=1)                      # first occurrence on ties
    masked = data.copy()
    masked[np.arange(p_gen), top] = -np.inf
    second = np.argmax(masked, axis=1)
    # competitor index per (v, s): v's best reference, or the runner-up when s IS it
    comp = np.broadcast_to(top[:, None], (p_gen, p_ref)).copy()
    comp[np.arange(p_gen), top] = second
    flat = (np.arange(p_gen)[:, None] * p_ref + comp).reshape(p_gen, p_ref)

    best_excl = ad.gather_flat(mu, flat, (1, p_gen, p_ref, 1))
    logits = ad.scale(ad.div(mu, ad.add_scalar(best_excl, config.epsilon)),
                      1.0 / config.bandwidth)
    shift = ad.constant(np.max(logits.data, axis=2, keepdims=True))
    scores = ad.exp(ad.sub(logits, shift))
    normalized = ad.div(scores, ad.sum_axis(scores, 2))
    return logits, normalized


def idmrf_layer_loss(normalized: Tensor4) -> Tensor4:
    """-log of the average best normalized score each reference patch gets.

    The max over generated patches is a hard selection whose gradient goes
    to the (first) argmax entry; the normalizer is the reference patch count.
    """
    if normalized.size == 0:
        raise IdMrfError("empty similarity matrix")
    p_ref = normalized.dims[2]
    best_per_ref = ad.max_axis(normalized, 1)
    mean_best = ad.scale(ad.reduce_sum(best_per_ref), 1.0 / p_ref)
    return ad.scale(ad.log(mean_best), -1.0)


def idmrf_total(gen_image: Tensor4, ref_image: Tensor4,
                backbone: FeatureBackbone, config: IdMrfConfig) -> Tensor4:
    """Weighted sum of per-layer losses, averaged over the batch."""
    if gen_image.dims != ref_image.dims:
        raise IdMrfError(f"image dims differ: {gen_image.dims} vs {ref_image.dims}")
    layers = list(config.layer_weights)
    gen_feats = extract_features(gen_image, backbone, layers)
    ref_feats = extract_features(ref_image, backbone, layers)
    n = gen_image.dims[0]
    total = None
    for layer in layers:
        weight = float(config.layer_weights[layer])
        gf, rf = gen_feats[layer], ref_feats[layer]
        for i in range(n):
            gi = ad.slice4(gf, (i, 0, 0, 0), (1,) + gf.dims[1:]) if n > 1 else gf
            ri = ad.slice4(rf, (i, 0, 0, 0), (1,) + rf.dims[1:]) if n > 1 else rf
            gp = extract_patches(gi, config.patch_size, config.patch_stride, layer)
            rp = extract_patches(ri, config.patch_size, config.patch_stride, layer)
            mu = cosine_similarity_matrix(gp, rp, config.norm_guard)
            _, normalized = relative_similarity(mu, config)
            term = ad.scale(idmrf_layer_loss(normalized), weight)
            total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / n)
