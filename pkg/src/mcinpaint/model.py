"""Multi-branch inpainting generator and the image critics.

The generator runs several parallel encoder branches over the same
full-resolution (image, mask) input.  Branches differ in filter size,
downsampling depth, and dilation, so they see different receptive fields.
Each branch output is bilinearly upsampled back to the input resolution,
the results are concatenated, and a shared two-layer decoder maps the
stack to an image in (-1, 1).

Two critics score realism: a global one over the whole image and a local
one over the hole crop (resized to a fixed input size).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcinpaint import autodiff as ad
from mcinpaint.autodiff import ConvSpec, Tensor4
from mcinpaint.masks import Mask


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class BranchSpec:
    """One encoder branch: filter size, stride-2 stage count, the dilation
    of the deepest stage's refinement conv, and the base channel width."""

    filter_size: int
    depth: int
    dilation: int
    width: int

    def __post_init__(self):
        if self.filter_size < 1 or self.depth < 1 or self.dilation < 1 or self.width < 1:
            raise ModelError(f"invalid branch spec {self}")


@dataclass(frozen=True)
class GeneratorConfig:
    branches: tuple
    decoder_width: int = 32
    in_channels: int = 4     # RGB + mask plane
    out_channels: int = 3

    def __post_init__(self):
        if not self.branches:
            raise ModelError("generator needs at least one branch")
        if self.decoder_width < 1:
            raise ModelError("decoder width must be >= 1")


def default_generator_config(width_mult: float = 1.0) -> GeneratorConfig:
    def w(base):
        return max(int(round(base * width_mult)), 1)

    return GeneratorConfig(branches=(
        BranchSpec(filter_size=7, depth=1, dilation=2, width=w(16)),
        BranchSpec(filter_size=5, depth=2, dilation=2, width=w(16)),
        BranchSpec(filter_size=3, depth=2, dilation=2, width=w(16)),
    ), decoder_width=w(32))


def branch_conv_layers(spec: BranchSpec):
    """(c_out, stride, dilation) per conv: a stem, then per stage one
    stride-2 conv and one refinement conv (dilated in the deepest stage)."""
    layers = [(spec.width, 1, 1)]
    for stage in range(1, spec.depth + 1):
        ch = spec.width * (2 ** stage)
        layers.append((ch, 2, 1))
        layers.append((ch, 1, spec.dilation if stage == spec.depth else 1))
    return layers


def branch_output_channels(spec: BranchSpec) -> int:
    return spec.width * (2 ** spec.depth)


def branch_receptive_field(spec: BranchSpec) -> int:
    """Input-pixel support of one pre-upsampling output activation,
    by the standard jump/size recurrence, plus the upsampling tap."""
    rf, jump = 1, 1
    k = spec.filter_size
    for _, stride, dilation in branch_conv_layers(spec):
        rf += (k - 1) * dilation * jump
        jump *= stride
    return rf + jump


def _mask_plane(mask, batch: int, dims, dtype) -> np.ndarray:
    if isinstance(mask, Mask):
        arr = mask.values
    elif isinstance(mask, Tensor4):
        arr = mask.data
    else:
        arr = np.asarray(mask)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[:, :, :, None]
    if arr.ndim != 4 or arr.shape[3] != 1 or arr.shape[0] not in (1, batch):
        raise ModelError(f"mask shape {arr.shape} does not fit batch {batch}")
    if arr.shape[1:3] != dims:
        raise ModelError(f"mask dims {arr.shape[1:3]} do not match image {dims}")
    if arr.shape[0] == 1 and batch > 1:
        arr = np.broadcast_to(arr, (batch,) + arr.shape[1:])
    return np.ascontiguousarray(arr).astype(dtype)


def mask_tensor(mask, batch: int, dims, dtype) -> Tensor4:
    return ad.constant(_mask_plane(mask, batch, dims, dtype))


class Generator:
    """Parallel encoder branches fused by a shared two-conv decoder."""

    def __init__(self, config: GeneratorConfig, params: dict):
        self.config = config
        self.recipe = self._make_recipe(config)
        for name, spec, _ in self.recipe:
            w = params.get(name + ".weight")
            b = params.get(name + ".bias")
            if w is None or b is None:
                raise ModelError(f"missing parameters for layer {name}")
            want = (spec.kh, spec.kw, spec.c_in, spec.c_out)
            if w.dims != want:
                raise ModelError(f"{name}.weight has dims {w.dims}, expected {want}")
            if b.dims != (1, 1, 1, spec.c_out):
                raise ModelError(f"{name}.bias has dims {b.dims}")
        self.params = params

    @staticmethod
    def _make_recipe(config: GeneratorConfig):
        recipe = []
        for bi, branch in enumerate(config.branches, start=1):
            c_in = config.in_channels
            k = branch.filter_size
            for li, (c_out, stride, dilation) in enumerate(branch_conv_layers(branch), start=1):
                spec = ConvSpec(k, k, c_in, c_out, stride=(stride, stride),
                                dilation=(dilation, dilation), padding="same")
                recipe.append((f"gen.branch{bi}.conv{li}", spec, "leaky"))
                c_in = c_out
        fused = sum(branch_output_channels(b) for b in config.branches)
        recipe.append(("gen.decoder.conv1",
                       ConvSpec(3, 3, fused, config.decoder_width), "leaky"))
        recipe.append(("gen.decoder.conv2",
                       ConvSpec(3, 3, config.decoder_width, config.out_channels), "tanh"))
        return recipe

    @classmethod
    def build(cls, config: GeneratorConfig, seed: int, dtype=np.float32) -> "Generator":
        rng = np.random.default_rng(seed)
        params = {}
        for name, spec, act in cls._make_recipe(config):
            fan_in = spec.kh * spec.kw * spec.c_in
            gain = 2.0 if act == "leaky" else 1.0
            w = rng.standard_normal((spec.kh, spec.kw, spec.c_in, spec.c_out))
            w *= np.sqrt(gain / fan_in)
            params[name + ".weight"] = Tensor4(w.astype(dtype), requires_grad=True)
            params[name + ".bias"] = Tensor4(np.zeros((1, 1, 1, spec.c_out), dtype=dtype),
                                             requires_grad=True)
        return cls(config, params)

    def astype(self, dtype) -> "Generator":
        params = {name: Tensor4(t.data.astype(dtype), requires_grad=True)
                  for name, t in self.params.items()}
        return Generator(self.config, params)

    @property
    def dtype(self):
        return self.params[self.recipe[0][0] + ".weight"].dtype

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, x: Tensor4, mask) -> Tensor4:
        """x is the hole-zeroed image in [-1, 1]; the mask plane is
        concatenated as an extra channel before the branches."""
        n, h, w, c = x.dims
        if c != self.config.in_channels - 1:
            raise ModelError(f"input has {c} channels, generator expects "
                             f"{self.config.in_channels - 1} plus the mask plane")
        m = mask_tensor(mask, n, (h, w), x.dtype)
        inp = ad.concat([x, m], axis=3)

        per_branch = {}
        feats = []
        for name, spec, act in self.recipe:
            if name.startswith("gen.branch"):
                branch_key = name.split(".")[1]
                cur = per_branch.get(branch_key, inp)
                cur = ad.conv2d(cur, spec, self.params[name + ".weight"],
                                self.params[name + ".bias"])
                cur = ad.leaky_relu(cur, 0.2)
                per_branch[branch_key] = cur
        for bi in range(1, len(self.config.branches) + 1):
            out = per_branch[f"branch{bi}"]
            if out.dims[1] != h or out.dims[2] != w:
                out = ad.bilinear_upsample(out, h, w)
            feats.append(out)
        fused = ad.concat(feats, axis=3) if len(feats) > 1 else feats[0]

        dec1_name, dec1_spec, _ = self.recipe[-2]
        dec2_name, dec2_spec, _ = self.recipe[-1]
        hidden = ad.leaky_relu(ad.conv2d(fused, dec1_spec,
                                         self.params[dec1_name + ".weight"],
                                         self.params[dec1_name + ".bias"]), 0.2)
        return ad.tanh(ad.conv2d(hidden, dec2_spec,
                                 self.params[dec2_name + ".weight"],
                                 self.params[dec2_name + ".bias"]))


def generator_forward(x: Tensor4, mask, generator: Generator) -> Tensor4:
    return generator.forward(x, mask)


def compose_output(y: Tensor4, mask, g_out: Tensor4) -> Tensor4:
    """Known pixels verbatim from y, unknown pixels from the generator."""
    if y.dims != g_out.dims:
        raise ModelError(f"shape mismatch: {y.dims} vs {g_out.dims}")
    m = mask_tensor(mask, y.dims[0], y.dims[1:3], y.dtype)
    keep = ad.constant(1.0 - m.data)
    return ad.add(ad.mul(y, keep), ad.mul(g_out, m))


# ---------------------------------------------------------------- critics


class Critic:
    """Strided conv stack ending in one scalar score per batch element."""

    def __init__(self, prefix: str, input_size: int, params: dict,
                 widths=(16, 32, 48, 64), in_channels: int = 3):
        if input_size < 16:
            raise ModelError(f"critic input size {input_size} too small (need >= 16)")
        self.prefix = prefix
        self.input_size = int(input_size)
        self.widths = tuple(widths)
        self.recipe = self._make_recipe(prefix, self.input_size, self.widths, in_channels)
        for name, spec in self.recipe:
            w = params.get(name + ".weight")
            if w is None or w.dims != (spec.kh, spec.kw, spec.c_in, spec.c_out):
                raise ModelError(f"bad or missing weights for {name}")
        self.params = params

    @staticmethod
    def _make_recipe(prefix, input_size, widths, in_channels):
        recipe = []
        c_in = in_channels
        size = input_size
        for li, c_out in enumerate(widths, start=1):
            recipe.append((f"{prefix}.conv{li}",
                           ConvSpec(5, 5, c_in, c_out, stride=(2, 2), padding="same")))
            c_in = c_out
            size = -(-size // 2)
        recipe.append((f"{prefix}.score",
                       ConvSpec(size, size, c_in, 1, padding="valid")))
        return recipe

    @classmethod
    def build(cls, prefix: str, input_size: int, seed: int,
              widths=(16, 32, 48, 64), in_channels: int = 3, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        for name, spec in cls._make_recipe(prefix, input_size, widths, in_channels):
            fan_in = spec.kh * spec.kw * spec.c_in
            w = rng.standard_normal((spec.kh, spec.kw, spec.c_in, spec.c_out))
            w *= np.sqrt(2.0 / fan_in)
            params[name + ".weight"] = Tensor4(w.astype(dtype), requires_grad=True)
            params[name + ".bias"] = Tensor4(np.zeros((1, 1, 1, spec.c_out), dtype=dtype),
                                             requires_grad=True)
        return cls(prefix, input_size, params, widths, in_channels)

    def astype(self, dtype) -> "Critic":
        params = {name: Tensor4(t.data.astype(dtype), requires_grad=True)
                  for name, t in self.params.items()}
        return Critic(self.prefix, self.input_size, params, self.widths,
                      self.recipe[0][1].c_in)

    def forward(self, x: Tensor4) -> Tensor4:
        if x.dims[1] != self.input_size or x.dims[2] != self.input_size:
            raise ModelError(f"critic {self.prefix} expects {self.input_size}x"
                             f"{self.input_size} input, got {x.dims}")
        out = x
        for name, spec in self.recipe[:-1]:
            out = ad.leaky_relu(ad.conv2d(out, spec, self.params[name + ".weight"],
                                          self.params[name + ".bias"]), 0.2)
        name, spec = self.recipe[-1]
        return ad.conv2d(out, spec, self.params[name + ".weight"],
                         self.params[name + ".bias"])

    __call__ = forward


@dataclass
class Critics:
    """Global critic over the full image, local critic over the hole crop."""

    global_critic: Critic
    local_critic: Critic

    @classmethod
    def build(cls, image_size: int, seed: int, widths=(16, 32, 48, 64),
              dtype=np.float32) -> "Critics":
        local_size = max(image_size // 2, 16)
        return cls(
            global_critic=Critic.build("critic.global", image_size, seed + 1,
                                       widths, dtype=dtype),
            local_critic=Critic.build("critic.local", local_size, seed + 2,
                                      widths, dtype=dtype),
        )

    def parameters(self) -> dict:
        out = dict(self.global_critic.params)
        out.update(self.local_critic.params)
        return out

    def astype(self, dtype) -> "Critics":
        return Critics(self.global_critic.astype(dtype), self.local_critic.astype(dtype))


def _normalize_bboxes(hole_bbox, batch: int, image_dims):
    if isinstance(hole_bbox, tuple):
        bboxes = [hole_bbox] * batch
    else:
        bboxes = list(hole_bbox)
        if len(bboxes) != batch:
            raise ModelError(f"{len(bboxes)} bboxes for batch of {batch}")
    h, w = image_dims
    for top, left, hh, ww in bboxes:
        if top < 0 or left < 0 or hh < 1 or ww < 1 or top + hh > h or left + ww > w:
            raise ModelError(f"hole bbox {(top, left, hh, ww)} out of bounds "
                             f"for {h}x{w} image")
    return bboxes


def crop_resize(images: Tensor4, hole_bbox, out_h: int, out_w: int) -> Tensor4:
    """Per-sample hole crops, bilinearly resized to a fixed size."""
    n, h, w, c = images.dims
    bboxes = _normalize_bboxes(hole_bbox, n, (h, w))
    crops = []
    for i, (top, left, hh, ww) in enumerate(bboxes):
        crop = ad.slice4(images, (i, top, left, 0), (1, hh, ww, c))
        crops.append(ad.bilinear_resize(crop, out_h, out_w))
    return ad.concat(crops, axis=0) if len(crops) > 1 else crops[0]


def critic_scores(image: Tensor4, hole_bbox, critics: Critics):
    """(global score, local score), one scalar each per batch element."""
    size = critics.local_critic.input_size
    local_input = crop_resize(image, hole_bbox, size, size)
    return critics.global_critic(image), critics.local_critic(local_input)


def combined_score(global_score: Tensor4, local_score: Tensor4) -> Tensor4:
    """The generator's adversarial score: the mean of the two critics."""
    return ad.scale(ad.add(global_score, local_score), 0.5)
