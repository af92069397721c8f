"""Assembly of the segmentation network: two parallel VGG-style encoders, a
residual decision-accumulating decoder chain with gradient gating, optional
additional residual blocks, a spatial correlation correction block (SCCB) and
a final per-pixel softmax.

Gradient-flow rules realized here:
  * each decoder block's upsampled feature input is stop-gradient gated,
    except the first block (its input comes from the encoders, which must
    keep receiving learning signal through skip connections);
  * the class-decision residual chain is never gated, so every block's 1x1
    decision conv trains end to end;
  * the SCCB reads gated copies of its inputs and contributes only through
    an ungated residual addition.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, OrthosegError


@dataclass
class NoiseRates:
    """Current noiserate per network region.

    Encoder/decoder rates are keyed by input feature-map count buckets
    (upper bounds); SCCB and additional-residual rates are flat.
    """

    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    sccb: float = 0.0625
    residual: float = 0.0625

    @classmethod
    def default(cls):
        table = {64: 0.0625, 128: 0.125, 256: 0.1875, 512: 0.25}
        return cls(encoder=dict(table), decoder=dict(table), sccb=0.0625, residual=0.0625)

    def rate(self, region, channels=None):
        if region == "sccb":
            return self.sccb
        if region == "residual":
            return self.residual
        buckets = getattr(self, region)
        for bound in sorted(buckets):
            if channels <= bound:
                return buckets[bound]
        return buckets[max(buckets)]

    def decay(self, encoder_factor=0.75, decoder_factor=0.375, sccb_factor=0.25):
        self.encoder = {k: v * encoder_factor for k, v in self.encoder.items()}
        self.decoder = {k: v * decoder_factor for k, v in self.decoder.items()}
        self.residual *= decoder_factor
        self.sccb *= sccb_factor

    def to_dict(self):
        return {
            "encoder": {str(k): v for k, v in self.encoder.items()},
            "decoder": {str(k): v for k, v in self.decoder.items()},
            "sccb": self.sccb,
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder={int(k): v for k, v in d["encoder"].items()},
            decoder={int(k): v for k, v in d["decoder"].items()},
            sccb=d["sccb"],
            residual=d["residual"],
        )

    def copy(self):
        return NoiseRates(dict(self.encoder), dict(self.decoder), self.sccb, self.residual)


@dataclass(frozen=True)
class NetworkConfig:
    num_encoder_blocks: int
    primary_filters: tuple
    auxiliary_filters: tuple
    decoder_filters: int
    num_additional_residual_blocks: int
    num_classes: int
    sccb_dilations: tuple = ((5, 25), (11, 25))
    sccb_pool_size: int = 5
    sccb_conv1_filters: int = None
    sccb_conv2_filters: int = None
    input_scale_divisor: float = 6.0
    output_scale_divisor: float = 20.0
    decoder_dilation: int = 2
    input_channels: int = 3

    def __post_init__(self):
        if len(self.primary_filters) != self.num_encoder_blocks:
            raise ConfigurationError("primary_filters length must equal num_encoder_blocks")
        if len(self.auxiliary_filters) != self.num_encoder_blocks:
            raise ConfigurationError("auxiliary_filters length must equal num_encoder_blocks")
        if self.num_encoder_blocks < 1 or self.num_classes < 1:
            raise ConfigurationError("need at least one encoder block and one class")
        for name in ("sccb_conv1_filters", "sccb_conv2_filters"):
            v = getattr(self, name)
            if v is None:
                object.__setattr__(self, name, self.num_classes)
            elif v != self.num_classes:
                raise ConfigurationError(f"{name} must equal num_classes (decision conv)")

    @classmethod
    def benchmark(cls):
        """Seven-block instance used for the Potsdam benchmark (Table 1 widths)."""
        return cls(
            num_encoder_blocks=7,
            primary_filters=(64, 128, 256, 512, 512, 512, 512),
            auxiliary_filters=(64, 128, 256, 256, 256, 256, 256),
            decoder_filters=300,
            num_additional_residual_blocks=1,
            num_classes=6,
            sccb_dilations=((5, 25), (11, 25)),
        )

    @classmethod
    def desk(cls):
        """Small instance for CPU desk-scale verification and training."""
        return cls(
            num_encoder_blocks=3,
            primary_filters=(16, 32, 64),
            auxiliary_filters=(16, 32, 32),
            decoder_filters=32,
            num_additional_residual_blocks=1,
            num_classes=6,
            sccb_dilations=((5, 8), (11, 8)),
        )

    def conv_layers_in_block(self, block):
        """VGG-16 layout: blocks 1-2 have two 3x3 convs, deeper blocks three."""
        return 2 if block <= 2 else 3


class ModelParams:
    """Named parameter store; trainability lives on each tensor."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, tensor):
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name {name}")
        tensor.requires_grad = True
        self._tensors[name] = tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def set_trainable(self, pattern, flag):
        matched = [n for n in self._tensors if n == pattern or n.startswith(pattern + ".") or fnmatch.fnmatch(n, pattern)]
        if not matched:
            raise OrthosegError(f"pattern {pattern!r} matches no parameters")
        for n in matched:
            self._tensors[n].requires_grad = bool(flag)
            if not flag:
                self._tensors[n].grad = None
        return matched

    def count(self):
        """(trainable scalar count, total scalar count)."""
        trainable = sum(t.data.size for t in self._tensors.values() if t.requires_grad)
        total = sum(t.data.size for t in self._tensors.values())
        return trainable, total

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def frozen_names(self):
        return [n for n, t in self._tensors.items() if not t.requires_grad]


def _he_conv(rng, out_ch, in_ch, kh, kw, dtype=np.float32):
    fan_in = in_ch * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kh, kw)).astype(dtype)


class Model:
    """A built network: immutable config plus its parameter store."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, config, seed):
        rng = np.random.default_rng(seed)
        params = ModelParams()
        cfg = config

        def add_conv(name, out_ch, in_ch, k):
            params.add(f"{name}.weight", Tensor(_he_conv(rng, out_ch, in_ch, k, k)))
            params.add(f"{name}.bias", Tensor(np.zeros(out_ch, dtype=np.float32)))

        for side, filters in (("primary", cfg.primary_filters), ("auxiliary", cfg.auxiliary_filters)):
            in_ch = cfg.input_channels
            for b in range(1, cfg.num_encoder_blocks + 1):
                out_ch = filters[b - 1]
                for i in range(1, cfg.conv_layers_in_block(b) + 1):
                    add_conv(f"encoder.{side}.block{b}.conv{i}", out_ch, in_ch, 3)
                    in_ch = out_ch

        e = cfg.num_encoder_blocks
        feat_in = cfg.primary_filters[-1] + cfg.auxiliary_filters[-1]
        for j in range(1, e + 1):
            skip_ch = cfg.primary_filters[e - j] + cfg.auxiliary_filters[e - j]
            cat_ch = feat_in + skip_ch + 2 * cfg.input_channels * 2
            add_conv(f"decoder.block{j}.conv1", cfg.decoder_filters, cat_ch, 3)
            add_conv(f"decoder.block{j}.conv2", cfg.decoder_filters, cfg.decoder_filters, 3)
            add_conv(f"decoder.block{j}.decision", cfg.num_classes, cfg.decoder_filters, 1)
            feat_in = cfg.decoder_filters

        for r in range(1, cfg.num_additional_residual_blocks + 1):
            cat_ch = cfg.decoder_filters + 2 * cfg.input_channels * 2
            add_conv(f"residual.block{r}.conv1", cfg.decoder_filters, cat_ch, 3)
            add_conv(f"residual.block{r}.conv2", cfg.decoder_filters, cfg.decoder_filters, 3)
            add_conv(f"residual.block{r}.decision", cfg.num_classes, cfg.decoder_filters, 1)

        sccb_in = cfg.num_classes + cfg.decoder_filters
        branch_total = 0
        for rate, nf in cfg.sccb_dilations:
            add_conv(f"sccb.branch_d{rate}", nf, sccb_in, 3)
            branch_total += nf
        add_conv("sccb.conv1", cfg.sccb_conv1_filters, branch_total + cfg.num_classes, 1)
        add_conv("sccb.conv2", cfg.sccb_conv2_filters, cfg.sccb_conv1_filters, 1)
        return cls(cfg, params)

    # -- forward ----------------------------------------------------------

    def forward(self, primary, auxiliary, training=False, rng=None, noiserates=None,
                taps=None, perturb=None, record_graph=None):
        """Run the network; returns per-pixel class probabilities.

        ``taps``: optional dict filled with named intermediate tensors for
        instrumentation.  ``perturb``: optional dict tap-name -> array added
        at that point (forward-sensitivity probes).
        """
        if record_graph is None:
            record_graph = training
        if record_graph:
            return self._forward(primary, auxiliary, training, rng, noiserates, taps, perturb)
        with ad.no_grad():
            return self._forward(primary, auxiliary, training, rng, noiserates, taps, perturb)

    def _tap(self, taps, name, tensor, perturb):
        if perturb and name in perturb:
            tensor = ad.add(tensor, Tensor(np.asarray(perturb[name], dtype=tensor.data.dtype)))
        if taps is not None:
            taps[name] = tensor
        return tensor

    def _forward(self, primary, auxiliary, training, rng, rates, taps, perturb):
        cfg = self.config
        if rates is None:
            rates = NoiseRates.default()
        if training and rng is None:
            raise ConfigurationError("training-mode forward needs an rng for noise")
        if not isinstance(primary, Tensor):
            primary = Tensor(primary)
        if not isinstance(auxiliary, Tensor):
            auxiliary = Tensor(auxiliary)
        e = cfg.num_encoder_blocks
        n, c, h, w = primary.data.shape
        if auxiliary.data.shape != primary.data.shape:
            raise ConfigurationError("primary and auxiliary inputs must share shape")
        if c != cfg.input_channels:
            raise ConfigurationError(f"expected {cfg.input_channels} input channels, got {c}")
        if h % (1 << e) or w % (1 << e):
            raise ConfigurationError(
                f"input extents {h}x{w} must be divisible by 2^{e} = {1 << e}")
        p = self.params

        def conv(x, name, dilation=1):
            return ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], dilation=dilation, padding="same")

        def noise(x, region, channels=None):
            return ad.dmgn(x, rates.rate(region, channels), training, rng)

        # full-input pyramid for the per-block raw-input feeds
        net_input = ad.concat_channels([primary, auxiliary])
        pyramid = {1: net_input}
        for lvl in range(1, e):
            pyramid[1 << lvl] = ad.avg_pool(pyramid[1 << (lvl - 1)], 2, stride=2, padding="valid")

        def encode(side, filters, x):
            skips = []
            for b in range(1, e + 1):
                ch = filters[b - 1]
                for i in range(1, cfg.conv_layers_in_block(b) + 1):
                    if b >= 4 and i > 1:
                        x = noise(x, "encoder", x.data.shape[1])
                    x = ad.elu(conv(x, f"encoder.{side}.block{b}.conv{i}"))
                skips.append(x)
                if taps is not None:
                    taps[f"encoder.{side}.block{b}.pre_pool"] = x
                x = ad.max_pool2(x)
                x = noise(x, "encoder", ch)
            return skips, x

        p_skips, p_bott = encode("primary", cfg.primary_filters, primary)
        a_skips, a_bott = encode("auxiliary", cfg.auxiliary_filters, auxiliary)

        bottleneck = ad.concat_channels([p_bott, a_bott])
        feats = ad.scale_const(bottleneck, 1.0 / cfg.input_scale_divisor)
        hb, wb = h >> e, w >> e
        decis = Tensor(np.zeros((n, cfg.num_classes, hb, wb), dtype=primary.data.dtype))

        for j in range(1, e + 1):
            feats = self._tap(taps, f"decoder.block{j}.features_in", feats, perturb)
            if taps is not None:
                taps[f"decoder.block{j}.decisions_in"] = decis
            f_up = ad.upsample2(feats)
            if taps is not None:
                taps[f"decoder.block{j}.features_up"] = f_up
            if j > 1:
                f_up = ad.stop_gradient(f_up)
            d_up = ad.upsample2(decis)
            scaled_input = pyramid[1 << (e - j)]
            sub_map = ad.sub(scaled_input, ad.avg_pool(scaled_input, 5, stride=1, padding="same"))
            skip_p, skip_a = p_skips[e - j], a_skips[e - j]
            cat = ad.concat_channels([
                noise(f_up, "decoder", f_up.data.shape[1]),
                noise(skip_p, "decoder", skip_p.data.shape[1]),
                noise(skip_a, "decoder", skip_a.data.shape[1]),
                scaled_input,
                sub_map,
            ])
            h1 = ad.elu(conv(cat, f"decoder.block{j}.conv1", cfg.decoder_dilation))
            h1 = noise(h1, "decoder", h1.data.shape[1])
            feats = ad.elu(conv(h1, f"decoder.block{j}.conv2", cfg.decoder_dilation))
            corr = conv(feats, f"decoder.block{j}.decision")
            decis = ad.add(d_up, corr)
            if taps is not None:
                taps[f"decoder.block{j}.features_out"] = feats
                taps[f"decoder.block{j}.decisions_out"] = decis

        decis = ad.scale_const(decis, 1.0 / cfg.output_scale_divisor)

        for r in range(1, cfg.num_additional_residual_blocks + 1):
            feats = self._tap(taps, f"residual.block{r}.features_in", feats, perturb)
            f_gated = ad.stop_gradient(feats)
            if taps is not None:
                taps[f"residual.block{r}.features_gated"] = f_gated
            scaled_input = pyramid[1]
            sub_map = ad.sub(scaled_input, ad.avg_pool(scaled_input, 5, stride=1, padding="same"))
            cat = ad.concat_channels([
                ad.dmgn(f_gated, rates.rate("residual"), training, rng),
                scaled_input,
                sub_map,
            ])
            h1 = ad.elu(conv(cat, f"residual.block{r}.conv1", cfg.decoder_dilation))
            h1 = ad.dmgn(h1, rates.rate("residual"), training, rng)
            feats = ad.elu(conv(h1, f"residual.block{r}.conv2", cfg.decoder_dilation))
            corr = conv(feats, f"residual.block{r}.decision")
            decis = ad.add(decis, corr)
            if taps is not None:
                taps[f"residual.block{r}.features_out"] = feats
                taps[f"residual.block{r}.decisions_out"] = decis

        # SCCB: fully gated side branch, ungated residual identity
        if taps is not None:
            taps["sccb.features_in"] = feats
            taps["sccb.decisions_in"] = decis
        d_gated = ad.stop_gradient(decis)
        f_gated = ad.stop_gradient(feats)
        if taps is not None:
            taps["sccb.decisions_gated"] = d_gated
            taps["sccb.features_gated"] = f_gated
        pooled = ad.avg_pool(ad.concat_channels([d_gated, f_gated]), cfg.sccb_pool_size,
                             stride=1, padding="same")
        branches = []
        for rate, _nf in cfg.sccb_dilations:
            br = ad.elu(conv(pooled, f"sccb.branch_d{rate}", dilation=rate))
            branches.append(ad.dmgn(br, rates.rate("sccb"), training, rng))
        cat = ad.concat_channels(branches + [d_gated])
        h1 = ad.elu(conv(cat, "sccb.conv1"))
        corr = conv(h1, "sccb.conv2")
        logits = ad.add(decis, corr)
        if taps is not None:
            taps["sccb.logits"] = logits

        return ad.softmax_channels(logits)


def build_network(config, seed):
    return Model.build(config, seed)


def count_params(params):
    return params.count()


def set_trainable(params, pattern, flag):
    return params.set_trainable(pattern, flag)
