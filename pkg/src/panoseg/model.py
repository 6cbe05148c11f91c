"""Full segmentation model: encoder -> per-branch fusion -> decoder, with
optional dual-view evaluation blended by spherical attention."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import (DecoderConfig, blend_views, init_decoder_params,
                      init_spherical_params, mlp_decode, spherical_attention)
from .encoder import (EncoderConfig, ModalityBundle, depth_to_pseudo_disparity,
                      encode, horizontal_positional_encoding, init_encoder_params)
from .fusion import FusionBlockConfig, fusion_block, init_fusion_params
from .geometry import roll_horizontal, unshift
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 128
    n_classes: int = 8
    modalities: tuple = ("rgb",)
    dual_view: bool = True
    use_branches: bool = True  # False: final branch only (ablation baseline)
    attention: str = "mcbam"
    mcbam_window: tuple = (4, 4)   # at branch-feature resolution
    mcbam_stride: tuple = (2, 2)
    mcbam_kernel: int = 3
    decoder_embed: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sph_kernel: int = 7

    def __post_init__(self):
        if "rgb" not in self.modalities:
            raise ValueError("rgb modality is required")
        if self.image_w != 2 * self.image_h:
            raise ValueError("equirectangular inputs need w == 2h")
        self.encoder.validate_image(self.image_h, self.image_w)


def bundle_from_sample(sample, modalities, d_t):
    """Preprocess a rendered sample into encoder-ready 3-channel inputs.

    Depth becomes pseudo-disparity; normals are rescaled from [-1, 1] to
    [0, 1] so every modality shares the encoder's input range.
    """
    images = {"rgb": Tensor(sample.rgb.astype(np.float32))}
    if "depth" in modalities:
        images["depth"] = depth_to_pseudo_disparity(sample.depth, d_t)
    if "normals" in modalities:
        images["normals"] = Tensor(((sample.normals + 1.0) / 2.0).astype(np.float32))
    return ModalityBundle(images=images)


class SegModel:
    """Holds all trainable parameters and runs single- or dual-view forward
    passes; the two views always share weights."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        enc = cfg.encoder
        self.n_branches = len(enc.global_blocks) if cfg.use_branches else 1
        self.branch_c = len(cfg.modalities) * enc.embed_dim
        from .fusion import MCBAMConfig
        self.fusion_cfg = FusionBlockConfig(
            attention=cfg.attention,
            mcbam=MCBAMConfig(window=tuple(cfg.mcbam_window),
                              stride=tuple(cfg.mcbam_stride),
                              spatial_kernel=cfg.mcbam_kernel))

        self.params = {}
        for name, p in init_encoder_params(enc, cfg.image_h, cfg.image_w, rng,
                                           dtype).items():
            self.params["enc." + name] = p
        for i in range(self.n_branches):
            for name, p in init_fusion_params(self.branch_c, self.fusion_cfg,
                                              rng, dtype).items():
                self.params[f"fus{i}." + name] = p
        self.dec_cfg = DecoderConfig(
            embed=cfg.decoder_embed, n_classes=cfg.n_classes,
            branch_channels=(self.branch_c,) * self.n_branches)
        for name, p in init_decoder_params(self.dec_cfg, rng, dtype).items():
            self.params["dec." + name] = p
        for name, p in init_spherical_params(cfg.n_classes, rng, cfg.sph_kernel,
                                             dtype).items():
            self.params["sph." + name] = p

        w_f = 2 * (cfg.image_w // enc.patch)
        c_total = self.n_branches * self.branch_c
        self.hpe = horizontal_positional_encoding(w_f, c_total)

    # -- parameter access ----------------------------------------------------

    def named_parameters(self, trainable_only=False):
        return {n: p for n, p in self.params.items()
                if not trainable_only or p.requires_grad}

    def freeze_encoder(self):
        for n, p in self.params.items():
            if n.startswith("enc."):
                p.requires_grad = False

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _sub(self, prefix):
        cut = len(prefix)
        return {n[cut:]: p for n, p in self.params.items() if n.startswith(prefix)}

    # -- forward -------------------------------------------------------------

    def _shift_bundle(self, bundle):
        s = self.cfg.image_w // 2
        return ModalityBundle(
            images={m: roll_horizontal(t, s) for m, t in bundle.images.items()})

    def features(self, bundle):
        """Encoder branch features for one view, before fusion."""
        branches = encode(bundle, self.cfg.encoder, self._sub("enc."))
        if not self.cfg.use_branches:
            branches = branches[-1:]
        merged = []
        for br in branches:
            n, c, ht, wt = br.shape
            merged.append(br.reshape((1, n * c, ht, wt)))
        return merged

    def decode_features(self, merged, shifted_view):
        fused = [fusion_block(br, self.fusion_cfg, self._sub(f"fus{i}."))
                 for i, br in enumerate(merged)]
        pe = self.hpe.pe_shifted if shifted_view else self.hpe.pe
        return mlp_decode(fused, pe, self.dec_cfg, self._sub("dec."),
                          self.cfg.image_h, self.cfg.image_w)

    def forward_view(self, bundle, shifted_view=False):
        return self.decode_features(self.features(bundle), shifted_view)

    def forward_dual_view(self, bundle, cached_features=None):
        """Returns (fused logits in the original frame, per-view logits).

        In single-view mode the fused output is just the first view's
        logits. ``cached_features`` optionally supplies precomputed encoder
        branch features (original, shifted) for frozen-encoder training.
        """
        if cached_features is not None:
            feats1, feats2 = cached_features
        else:
            feats1 = self.features(bundle)
            feats2 = (self.features(self._shift_bundle(bundle))
                      if self.cfg.dual_view else None)
        x1 = self.decode_features(feats1, shifted_view=False)
        if not self.cfg.dual_view:
            return x1, (x1,)
        x2 = unshift(self.decode_features(feats2, shifted_view=True),
                     self.cfg.image_w // 2)
        alpha = spherical_attention(x1, x2, self._sub("sph."))
        fused = blend_views(x1, x2, alpha)
        return fused, (x1, x2)

    # -- persistence ---------------------------------------------------------

    def save_checkpoint(self, path):
        """All parameters in one file of named, length-prefixed PTNS blobs."""
        import struct

        from .data_io import _atomic_write, encode_tensor

        parts = [struct.pack("<I", len(self.params))]
        for name in sorted(self.params):
            blob = encode_tensor(self.params[name].data.astype(np.float32))
            raw = name.encode()
            parts.append(struct.pack("<H", len(raw)) + raw
                         + struct.pack("<Q", len(blob)) + blob)
        _atomic_write(path, b"".join(parts))

    def load_checkpoint(self, path):
        import struct

        from .data_io import TruncatedFileError, decode_tensor

        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < 4:
            raise TruncatedFileError("checkpoint shorter than its header")
        (count,) = struct.unpack_from("<I", blob, 0)
        off = 4
        loaded = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (blen,) = struct.unpack_from("<Q", blob, off)
            off += 8
            loaded[name] = decode_tensor(blob[off:off + blen])
            off += blen
        if set(loaded) != set(self.params):
            missing = set(self.params) ^ set(loaded)
            raise ValueError(f"checkpoint does not match model config: {missing}")
        for name, arr in loaded.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            self.params[name].data = arr.astype(self.dtype)
