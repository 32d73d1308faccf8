"""The two networks: a single-view disparity encoder-decoder with skip
connections, and a joint pose/reliability network sharing one feature
encoder.

Both are width-configurable so a desk-scale variant (base_channels=8,
32x104 input) trains on a single CPU core while keeping the architecture
shape of the full model (base_channels=32, 128x416). All convolution layers
are followed by batch norm and ReLU except the prediction layers, which are
plain convolutions with bias.

Disparity predictions are constrained to (1/(alpha+beta), 1/beta) through
1/(alpha*sigmoid(x)+beta); pose outputs are 6 scalars per source frame
(tx, ty, tz, rx, ry, rz), zero at initialization and scaled by 0.01 to bias
the net toward small motions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, batch_norm, concat, conv2d, conv2d_transpose

DISP_ALPHA = 10.0
DISP_BETA = 0.1
POSE_SCALE = 0.01
N_SCALES = 4


@dataclass(frozen=True)
class DispNetConfig:
    base_channels: int = 8
    height: int = 32
    width: int = 104

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        _check_dims(self.height, self.width)


@dataclass(frozen=True)
class PoseExpNetConfig:
    base_channels: int = 8
    n_sources: int = 2
    height: int = 32
    width: int = 104

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.n_sources != 2:
            raise ValueError("only 3-frame sequences (2 sources) are supported")
        _check_dims(self.height, self.width)


def _check_dims(h: int, w: int) -> None:
    if h % 4 or w % 4:
        raise ValueError(f"input dimensions must be divisible by 4, got {h}x{w}")
    if h < 16 or w < 16:
        raise ValueError(f"input too small: {h}x{w}")


def usable_scales(h: int, w: int, max_scales: int = N_SCALES) -> int:
    """Number of loss pyramid levels with integral dimensions.

    Level l needs h and w divisible by 2^l; the decoders emit predictions at
    exactly these sizes for such levels.
    """
    n = 1
    while n < max_scales and h % 2 ** n == 0 and w % 2 ** n == 0:
        n += 1
    return n


class _Network:
    """Named-parameter container with layer builders used by both nets."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    # -- construction ---------------------------------------------------------

    def _init_conv(self, rng, name, cin, cout, k, bias=False, zero=False):
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            bound = math.sqrt(3.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        if bias:
            self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _init_deconv(self, rng, name, cin, cout, k=3):
        bound = math.sqrt(3.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cin, cout, k, k))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)

    def _init_bn(self, name, c):
        self.params[f"{name}.g"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c), requires_grad=True)
        self.buffers[f"{name}.rm"] = np.zeros(c)
        self.buffers[f"{name}.rv"] = np.ones(c)

    def _init_conv_bn(self, rng, name, cin, cout, k):
        self._init_conv(rng, name, cin, cout, k)
        self._init_bn(f"{name}.bn", cout)

    def _init_deconv_bn(self, rng, name, cin, cout):
        self._init_deconv(rng, name, cin, cout)
        self._init_bn(f"{name}.bn", cout)

    # -- forward helpers --------------------------------------------------------

    def _bn(self, x, name, training):
        return batch_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"],
                          self.buffers[f"{name}.rm"], self.buffers[f"{name}.rv"],
                          training)

    def _conv_bn_relu(self, x, name, stride, training):
        out = conv2d(x, self.params[f"{name}.w"], stride=stride)
        return self._bn(out, f"{name}.bn", training).relu()

    def _deconv_bn_relu(self, x, name, hw, training):
        out = conv2d_transpose(x, self.params[f"{name}.w"], stride=2)
        out = out[:, :, :hw[0], :hw[1]]
        return self._bn(out, f"{name}.bn", training).relu()

    def _pred(self, x, name):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                      stride=1)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def load_params(self, params: dict[str, Tensor],
                    buffers: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params) or set(buffers) != set(self.buffers):
            missing = set(self.params) ^ set(params)
            raise ValueError(f"parameter names do not match architecture "
                             f"(mismatched: {sorted(missing)[:4]}...)")
        for name, p in params.items():
            if p.data.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{p.data.shape} != {self.params[name].data.shape}")
        self.params = params
        self.buffers = buffers


class DispNet(_Network):
    """Encoder-decoder disparity network.

    Encoder: 7 stride-2 conv stages with kernels 7,7,5,5,3,3,3 and widths
    (b, 2b, 4b, 8b, 8b, 8b, 8b). Decoder: 7 deconv stages with encoder skip
    concatenations, emitting a 1-channel disparity prediction at each of the
    4 finest scales.
    """

    ENC_KERNELS = (7, 7, 5, 5, 3, 3, 3)

    def __init__(self, config: DispNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.enc_channels = (b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b, 8 * b)
        self.dec_channels = (8 * b, 8 * b, 8 * b, 4 * b, 2 * b, b, b)
        rng = np.random.default_rng(seed)

        cin = 3
        for i, (cout, k) in enumerate(zip(self.enc_channels, self.ENC_KERNELS), 1):
            self._init_conv_bn(rng, f"enc{i}", cin, cout, k)
            cin = cout
        # decoder level i upsamples to the resolution of encoder level i-1
        skip = (0, *self.enc_channels[:-1])  # channels concatenated at each level
        cin = self.enc_channels[-1]
        for i, cout in zip(range(7, 0, -1), self.dec_channels):
            self._init_deconv_bn(rng, f"up{i}", cin, cout)
            self._init_conv_bn(rng, f"dec{i}", cout + skip[i - 1], cout, 3)
            cin = cout
        for l in range(N_SCALES):
            self._init_conv(rng, f"pred{l}", self.dec_channels[6 - l], 1,
                            3, bias=True)

    def forward(self, x: Tensor, training: bool) -> list[Tensor]:
        """[N, 3, H, W] -> disparity pyramid [full, 1/2, 1/4, 1/8], each
        [N, 1, h, w]."""
        n, c, h, w = x.data.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        _check_dims(h, w)
        feats = [x]
        for i in range(1, 8):
            feats.append(self._conv_bn_relu(feats[-1], f"enc{i}", 2, training))

        disparities: list[Tensor] = []
        d = feats[7]
        for i in range(7, 0, -1):
            hw = feats[i - 1].data.shape[2:]
            d = self._deconv_bn_relu(d, f"up{i}", hw, training)
            if i > 1:
                d = concat([d, feats[i - 1]], axis=1)
            d = self._conv_bn_relu(d, f"dec{i}", 1, training)
            if i <= N_SCALES:
                raw = self._pred(d, f"pred{i - 1}")
                disparities.append((raw.sigmoid() * DISP_ALPHA + DISP_BETA) ** -1.0)
        disparities.reverse()
        return disparities


class PoseExpNet(_Network):
    """Joint pose and reliability-mask network.

    A 5-stage shared encoder consumes the target and all source frames
    concatenated along channels. The pose head adds two stride-2 convs and a
    zero-initialized 1x1 conv to 6*(n_sources) channels, globally averaged.
    The mask head is a 5-deconv decoder emitting 4 channels (2 softmax pairs,
    one per source) at each of the 4 finest scales.
    """

    ENC_KERNELS = (7, 5, 3, 3, 3)

    def __init__(self, config: PoseExpNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.enc_channels = (b, 2 * b, 4 * b, 8 * b, 8 * b)
        self.dec_channels = (4 * b, 2 * b, b, b, b)
        rng = np.random.default_rng(seed)

        cin = 3 * (config.n_sources + 1)
        for i, (cout, k) in enumerate(zip(self.enc_channels, self.ENC_KERNELS), 1):
            self._init_conv_bn(rng, f"enc{i}", cin, cout, k)
            cin = cout
        self._init_conv_bn(rng, "pose1", 8 * b, 8 * b, 3)
        self._init_conv_bn(rng, "pose2", 8 * b, 8 * b, 3)
        self._init_conv(rng, "pose_pred", 8 * b, 6 * config.n_sources, 1,
                        bias=True, zero=True)
        cin = self.enc_channels[-1]
        for i, cout in zip(range(5, 0, -1), self.dec_channels):
            self._init_deconv_bn(rng, f"up{i}", cin, cout)
            cin = cout
        for l in range(N_SCALES):
            self._init_conv(rng, f"mask{l}", self.dec_channels[4 - l],
                            2 * config.n_sources, 3, bias=True)

    def forward(self, x: Tensor, training: bool) -> tuple[Tensor, list[Tensor]]:
        """[N, 3*(n_sources+1), H, W] (target frame first, then sources in
        temporal order) -> (poses [N, 6*n_sources], mask-logit pyramid
        [full, 1/2, 1/4, 1/8] each [N, 2*n_sources, h, w]).

        Pose rows hold (tx, ty, tz, rx, ry, rz) per source, target-to-source.
        """
        n, c, h, w = x.data.shape
        expected = 3 * (self.config.n_sources + 1)
        if c != expected:
            raise ValueError(f"expected {expected} input channels, got {c}")
        _check_dims(h, w)
        feats = [x]
        for i in range(1, 6):
            feats.append(self._conv_bn_relu(feats[-1], f"enc{i}", 2, training))

        p = self._conv_bn_relu(feats[5], "pose1", 2, training)
        p = self._conv_bn_relu(p, "pose2", 2, training)
        p = self._pred(p, "pose_pred")
        poses = p.mean(axis=(2, 3)) * POSE_SCALE

        logits: list[Tensor] = []
        d = feats[5]
        for i in range(5, 0, -1):
            hw = feats[i - 1].data.shape[2:]
            d = self._deconv_bn_relu(d, f"up{i}", hw, training)
            if i <= N_SCALES:
                logits.append(self._pred(d, f"mask{i - 1}"))
        logits.reverse()
        return poses, logits
