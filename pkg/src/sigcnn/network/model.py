"""DeepCNet(l, k) construction, the dense oracle pass, and ground states.

DeepCNet(l, k) takes an N x N x M input with N = 3 * 2^l and stacks

    conv 3x3 (M -> k), maxpool 2x2,
    conv 2x2 ((n-1)k -> nk), maxpool 2x2        for n = 2..l,
    fully connected 2x2 * lk -> (l+1)k,
    linear classifier (l+1)k -> classes,

all convolutions valid (no padding), all pools stride 2.  After pooling
stage j the spatial side is 3 * 2^(l-j) - 1, ending at exactly 2, which the
fully-connected layer consumes as a 2x2 field.

The *ground state* of a layer is the value every hidden vector takes when
the input is all zeros; it is nonzero once biases are, and the sparse
evaluator (see ``sparse.py``) only computes cells that can differ from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "DeepCNetConfig",
    "DeepCNet",
    "spatial_sizes",
    "architecture_string",
    "build_network",
    "compute_ground_states",
    "forward_dense",
    "apply_dropout",
]


def _leaky13(x):
    return np.maximum(x, x / 3.0)


def _leaky13_grad(x):
    return np.where(x > 0, np.asarray(1.0, x.dtype), np.asarray(1.0 / 3.0, x.dtype))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(x.dtype)


def _identity(x):
    return x


def _identity_grad(x):
    return np.ones_like(x)


# name -> (f, f').  "leaky13" is the default: f(x) = max(x, x/3), cheap to
# push through ground states and never fully dead.
ACTIVATIONS = {
    "leaky13": (_leaky13, _leaky13_grad),
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
}


@dataclass(frozen=True)
class DeepCNetConfig:
    """Architecture parameters.

    ``dropout_per_level`` has length l + 2: rates for the inputs of conv
    layers 1..l, then the fully-connected layer, then the classifier.
    """

    l: int
    k: int
    M: int = 1
    classes: int = 10
    dropout_per_level: tuple = None
    activation: str = "leaky13"

    def __post_init__(self):
        if self.l < 1:
            raise ValueError(f"depth parameter l must be >= 1, got {self.l}")
        if self.k < 1:
            raise ValueError(f"filter unit k must be >= 1, got {self.k}")
        if self.M < 1:
            raise ValueError(f"input channels M must be >= 1, got {self.M}")
        if self.classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.classes}")
        rates = self.dropout_per_level
        rates = (0.0,) * (self.l + 2) if rates is None else tuple(float(r) for r in rates)
        if len(rates) != self.l + 2:
            raise ValueError(
                f"dropout_per_level must have length l+2={self.l + 2}, got {len(rates)}"
            )
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ValueError(f"dropout rates must lie in [0, 1), got {rates}")
        object.__setattr__(self, "dropout_per_level", rates)
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; have {sorted(ACTIVATIONS)}"
            )

    @property
    def N(self) -> int:
        return 3 * 2 ** self.l

    @property
    def conv_channels(self) -> list:
        return [self.k * (i + 1) for i in range(self.l)]

    @property
    def fc_in(self) -> int:
        return 4 * self.l * self.k  # the final 2x2 field, flattened

    @property
    def fc_width(self) -> int:
        return (self.l + 1) * self.k


def spatial_sizes(cfg: DeepCNetConfig) -> list:
    """[(conv_out_side, pooled_side)] per stage; asserts the size recurrence."""
    s = cfg.N
    out = []
    for j in range(1, cfg.l + 1):
        f = 3 if j == 1 else 2
        c = s - f + 1
        assert c % 2 == 0, f"stage {j}: conv output side {c} not poolable"
        s = c // 2
        assert s == 3 * 2 ** (cfg.l - j) - 1 or (j == cfg.l and s == 2), (
            f"stage {j}: pooled side {s} breaks the 3*2^(l-j)-1 recurrence"
        )
        out.append((c, s))
    assert s == 2, f"final spatial side is {s}, expected 2"
    return out


def architecture_string(cfg: DeepCNetConfig) -> str:
    """Compact layer listing, e.g. input-100C3-MP2-200C2-MP2-...-500N-output."""
    parts = [f"input-{cfg.k}C3-MP2"]
    for n in range(2, cfg.l + 1):
        parts.append(f"{n * cfg.k}C2-MP2")
    parts.append(f"{(cfg.l + 1) * cfg.k}N-output")
    return "-".join(parts)


class DeepCNet:
    """Parameter container plus cached per-layer ground states.

    Conv weights are (f, f, c_in, c_out); the fully-connected and classifier
    weights are (in, out) so features multiply as ``x @ W + b``.
    """

    def __init__(self, cfg, conv_w, conv_b, fc_w, fc_b, out_w, out_b, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.conv_w = [np.asarray(w, self.dtype) for w in conv_w]
        self.conv_b = [np.asarray(b, self.dtype) for b in conv_b]
        self.fc_w = np.asarray(fc_w, self.dtype)
        self.fc_b = np.asarray(fc_b, self.dtype)
        self.out_w = np.asarray(out_w, self.dtype)
        self.out_b = np.asarray(out_b, self.dtype)
        self.velocities: dict = {}
        self.ground_states = compute_ground_states(self)

    @property
    def activation(self):
        return ACTIVATIONS[self.cfg.activation][0]

    @property
    def activation_grad(self):
        return ACTIVATIONS[self.cfg.activation][1]

    def params(self) -> list:
        """Ordered (name, array) pairs; the checkpoint and update order."""
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            out.append((f"conv{i}_w", w))
            out.append((f"conv{i}_b", b))
        out.append(("fc_w", self.fc_w))
        out.append(("fc_b", self.fc_b))
        out.append(("out_w", self.out_w))
        out.append(("out_b", self.out_b))
        return out

    def refresh_ground_states(self):
        self.ground_states = compute_ground_states(self)


def build_network(cfg: DeepCNetConfig, rng, dtype=np.float32) -> DeepCNet:
    """Fresh network: weights uniform +-sqrt(6/(fan_in+fan_out)), biases 0."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    spatial_sizes(cfg)  # assert the size arithmetic before allocating
    dtype = np.dtype(dtype)

    def glorot(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    conv_w, conv_b = [], []
    c_in = cfg.M
    for j, c_out in enumerate(cfg.conv_channels, start=1):
        f = 3 if j == 1 else 2
        conv_w.append(glorot((f, f, c_in, c_out), f * f * c_in, f * f * c_out))
        conv_b.append(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    fc_w = glorot((cfg.fc_in, cfg.fc_width), cfg.fc_in, cfg.fc_width)
    fc_b = np.zeros(cfg.fc_width, dtype=dtype)
    out_w = glorot((cfg.fc_width, cfg.classes), cfg.fc_width, cfg.classes)
    out_b = np.zeros(cfg.classes, dtype=dtype)
    return DeepCNet(cfg, conv_w, conv_b, fc_w, fc_b, out_w, out_b, dtype=dtype)


def compute_ground_states(net: DeepCNet) -> list:
    """Per-stage hidden value of an all-zero input (post-activation).

    Valid convolutions give every output cell full fan-in, so the zero
    input propagates as a single vector per layer: g_1 = f(b_1),
    g_j = f(b_j + sum_over_filter_taps W_j . g_{j-1}); pooling leaves it
    unchanged.
    """
    act = net.activation
    g = np.zeros(net.cfg.M, dtype=net.dtype)
    out = []
    for w, b in zip(net.conv_w, net.conv_b):
        g = act(b + g @ w.sum(axis=(0, 1)))
        out.append(g)
    return out


def _conv2d_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    f = w.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (f, f), axis=(0, 1))
    # win[i, j, c, u, v] = x[i+u, j+v, c]
    return np.einsum("ijcuv,uvco->ijo", win, w, optimize=True)


def _maxpool2(x: np.ndarray) -> np.ndarray:
    s = x.shape[0]
    return x.reshape(s // 2, 2, s // 2, 2, x.shape[2]).max(axis=(1, 3))


def dense_trace(net: DeepCNet, x: np.ndarray) -> dict:
    """Dense pass keeping every intermediate map (oracle / inspection)."""
    cfg = net.cfg
    x = np.asarray(x, dtype=net.dtype)
    if x.shape != (cfg.N, cfg.N, cfg.M):
        raise ValueError(
            f"input shape {x.shape} does not match network ({cfg.N}, {cfg.N}, {cfg.M})"
        )
    act = net.activation
    conv_out, pooled = [], []
    for w, b in zip(net.conv_w, net.conv_b):
        x = act(_conv2d_valid(x, w) + b)
        conv_out.append(x)
        x = _maxpool2(x)
        pooled.append(x)
    flat = x.ravel()
    hidden = act(flat @ net.fc_w + net.fc_b)
    scores = hidden @ net.out_w + net.out_b
    return {"conv": conv_out, "pooled": pooled, "hidden": hidden, "scores": scores}


def forward_dense(net: DeepCNet, x: np.ndarray) -> np.ndarray:
    """Textbook dense evaluation; the correctness oracle for the sparse path."""
    return dense_trace(net, x)["scores"]


def apply_dropout(x: np.ndarray, rate: float, mode: str, rng) -> np.ndarray:
    """Inverted dropout: zero components with probability ``rate`` and scale
    survivors by 1/(1-rate) in train mode; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if mode == "eval" or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = rng.random(x.shape) < keep
    return np.where(mask, x / x.dtype.type(keep), x.dtype.type(0.0))


def dropout_mask(shape, rate: float, rng, dtype) -> np.ndarray:
    """Mask with the 1/keep scale folded in; multiply features by it."""
    keep = 1.0 - rate
    return ((rng.random(shape) < keep) / keep).astype(dtype)
