"""Generator, discriminator and temporal conditioning networks.

Parameters are plain ``dict[str, Tensor]`` so they map one-to-one onto TGW1
checkpoint entries. Generator layout for ``levels = L``::

    enc0  conv3 (in -> w0) + ReLU                       full resolution
    encL  conv3/s2 (w_{l-1} -> w_l) + ReLU              l = 1..L
    FiLM on the bottleneck (resolution L)
    decl  convT2/s2 (w_{l+1} -> w_l) + ReLU, concat skip, conv3 + ReLU
    out   conv1 (w0 -> 1) + tanh

with ``w_l = base * 2**min(l, L-1)`` (16, 32, 64, 128, 128 for the defaults).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .tensorcore import ShapeError, Tensor, ops

Params = dict[str, Tensor]

# label map -> single anatomy channel
ANATOMY_LEVELS = {0: -1.0, 1: -1.0 / 3.0, 2: 1.0 / 3.0, 3: 1.0}


@dataclass
class GeneratorConfig:
    levels: int = 4
    base_channels: int = 16
    in_channels: int = 2
    use_film: bool = True
    use_mask: bool = True
    lstm_hidden: int = 32
    upsample: str = "transposed"  # or "nearest"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("GeneratorConfig: levels must be >= 1")
        if self.in_channels != 2:
            raise ValueError("GeneratorConfig: generator input is frame + anatomy (2 channels)")
        if self.upsample not in ("transposed", "nearest"):
            raise ValueError(f"GeneratorConfig: unknown upsample mode {self.upsample!r}")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** min(lv, self.levels - 1) for lv in range(self.levels + 1)]

    @property
    def bottleneck_channels(self) -> int:
        return self.widths()[-1]


@dataclass
class DiscriminatorConfig:
    base_channels: int = 16
    levels: int = 3
    slope: float = 0.2


@dataclass
class TemporalInput:
    rvbp_tac: Sequence[float]
    lvbp_tac: Sequence[float]
    frame_index: int
    num_frames: int

    def __post_init__(self):
        if len(self.rvbp_tac) != self.num_frames or len(self.lvbp_tac) != self.num_frames:
            raise ValueError(
                f"TemporalInput: TAC lengths {len(self.rvbp_tac)}/{len(self.lvbp_tac)} "
                f"do not match num_frames={self.num_frames}"
            )
        if not 0 <= self.frame_index < self.num_frames:
            raise ValueError(f"TemporalInput: frame_index {self.frame_index} outside [0, {self.num_frames})")
        if min(min(self.rvbp_tac), min(self.lvbp_tac)) < 0:
            raise ValueError("TemporalInput: activities must be nonnegative")

    def features(self) -> np.ndarray:
        """``(num_frames, 3)`` rows ``[rv, lv, onehot]`` with TACs scaled by their joint max."""
        rv = np.asarray(self.rvbp_tac, dtype=np.float64)
        lv = np.asarray(self.lvbp_tac, dtype=np.float64)
        peak = max(rv.max(), lv.max())
        if peak > 0:
            rv, lv = rv / peak, lv / peak
        onehot = np.zeros(self.num_frames)
        onehot[self.frame_index] = 1.0
        return np.stack([rv, lv, onehot], axis=1)


@dataclass
class FiLMParams:
    gamma: Tensor
    beta: Tensor


def encode_anatomy(labels: np.ndarray) -> np.ndarray:
    """Map the {0,1,2,3} label map onto one channel in [-1, 1]."""
    labels = np.asarray(labels)
    out = np.full(labels.shape, ANATOMY_LEVELS[0])
    for k, v in ANATOMY_LEVELS.items():
        out[labels == k] = v
    return out


# ----------------------------------------------------------------- parameters


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_temporal(cfg: GeneratorConfig, rng: np.random.Generator, zero_head: bool = True) -> Params:
    h = cfg.lstm_hidden
    c = cfg.bottleneck_channels
    p = {
        "temporal.lstm.w_ih": Tensor(rng.uniform(-1, 1, (4 * h, 3)) / np.sqrt(h), requires_grad=True),
        "temporal.lstm.w_hh": Tensor(rng.uniform(-1, 1, (4 * h, h)) / np.sqrt(h), requires_grad=True),
        "temporal.lstm.b": _zeros(4 * h),
        "temporal.conv.w": _he(rng, (h, h, 3), 3 * h),
        "temporal.conv.b": _zeros(h),
    }
    if zero_head:
        p["temporal.head.w"] = _zeros((2 * c, h))
    else:
        p["temporal.head.w"] = Tensor(rng.standard_normal((2 * c, h)) / np.sqrt(h), requires_grad=True)
    p["temporal.head.b"] = _zeros(2 * c)
    return p


def init_generator(cfg: GeneratorConfig, seed: int = 0) -> Params:
    """He-normal convolutions, zero biases, zero-initialized FiLM head."""
    rng = np.random.default_rng(seed)
    w = cfg.widths()
    p: Params = {
        "gen.enc0.w": _he(rng, (w[0], cfg.in_channels, 3, 3, 3), cfg.in_channels * 27),
        "gen.enc0.b": _zeros(w[0]),
    }
    for lv in range(1, cfg.levels + 1):
        p[f"gen.enc{lv}.w"] = _he(rng, (w[lv], w[lv - 1], 3, 3, 3), w[lv - 1] * 27)
        p[f"gen.enc{lv}.b"] = _zeros(w[lv])
    for lv in range(cfg.levels - 1, -1, -1):
        if cfg.upsample == "transposed":
            p[f"gen.up{lv}.w"] = _he(rng, (w[lv + 1], w[lv], 2, 2, 2), w[lv + 1] * 8)
        else:
            p[f"gen.up{lv}.w"] = _he(rng, (w[lv], w[lv + 1], 3, 3, 3), w[lv + 1] * 27)
        p[f"gen.up{lv}.b"] = _zeros(w[lv])
        p[f"gen.dec{lv}.w"] = _he(rng, (w[lv], 2 * w[lv], 3, 3, 3), 2 * w[lv] * 27)
        p[f"gen.dec{lv}.b"] = _zeros(w[lv])
    p["gen.out.w"] = _he(rng, (1, w[0], 1, 1, 1), w[0])
    p["gen.out.b"] = _zeros(1)
    p.update(init_temporal(cfg, rng))
    return p


def init_discriminator(cfg: DiscriminatorConfig, patch: Sequence[int], seed: int = 1) -> Params:
    """Strided conv blocks plus a zero-initialized affine output layer (logit 0 at init)."""
    rng = np.random.default_rng(seed)
    div = 2**cfg.levels
    if any(n % div for n in patch):
        raise ShapeError(f"discriminator: patch {tuple(patch)} not divisible by {div}")
    p: Params = {}
    cin = 1
    for lv in range(cfg.levels):
        cout = cfg.base_channels * 2**lv
        p[f"disc.conv{lv}.w"] = _he(rng, (cout, cin, 3, 3, 3), cin * 27)
        p[f"disc.conv{lv}.b"] = _zeros(cout)
        cin = cout
    grid = [n // div for n in patch]
    p["disc.fc.w"] = _zeros((1, cin * int(np.prod(grid))))
    p["disc.fc.b"] = _zeros(1)
    return p


# ----------------------------------------------------------------- forward


def temporal_encode(t: TemporalInput, params: Params) -> FiLMParams:
    """LSTM over per-frame ``[rv, lv, onehot]`` features -> conv1d -> time mean -> affine head.

    ``gamma = 1 + head[:C]`` and ``beta = head[C:]``.
    """
    feats = t.features()
    w_ih, w_hh, b = params["temporal.lstm.w_ih"], params["temporal.lstm.w_hh"], params["temporal.lstm.b"]
    hsz = w_hh.shape[1]
    h = Tensor(np.zeros(hsz))
    c = Tensor(np.zeros(hsz))
    states = []
    for step in range(t.num_frames):
        h, c = ops.lstm_cell(Tensor(feats[step]), h, c, w_ih, w_hh, b)
        states.append(h)
    seq = ops.stack(states, axis=1)  # (H, T)
    conv = ops.relu(ops.conv1d(seq, params["temporal.conv.w"], params["temporal.conv.b"], padding=1))
    pooled = ops.mean(conv, axis=1)
    head = ops.linear(pooled, params["temporal.head.w"], params["temporal.head.b"])
    nch = head.shape[0] // 2
    return FiLMParams(ops.shift(ops.narrow(head, 0, nch), 1.0), ops.narrow(head, nch, 2 * nch))


def film(m: Tensor, p: FiLMParams) -> Tensor:
    """Per-channel ``gamma_i * M_i + beta_i``."""
    if p.gamma.shape != (m.shape[0],) or p.beta.shape != (m.shape[0],):
        raise ShapeError(
            f"film: feature map has {m.shape[0]} channels but gamma/beta have {p.gamma.shape}/{p.beta.shape}"
        )
    return ops.channel_affine(m, p.gamma, p.beta)


def _upsample(x: Tensor, params: Params, lv: int, mode: str) -> Tensor:
    w, b = params[f"gen.up{lv}.w"], params[f"gen.up{lv}.b"]
    if mode == "transposed":
        return ops.conv_transpose3d(x, w, b, stride=2)
    # nearest-neighbour doubling as a fixed transposed conv with a ones kernel, then conv3
    c = x.shape[0]
    ones = np.zeros((c, c, 2, 2, 2))
    ones[np.arange(c), np.arange(c)] = 1.0
    up = ops.conv_transpose3d(x, Tensor(ones), stride=2)
    return ops.conv3d(up, w, b, padding=1)


def generator_forward(
    frame: Tensor,
    anatomy: Tensor,
    t: TemporalInput | None,
    params: Params,
    cfg: GeneratorConfig,
) -> Tensor:
    """Map an early frame (1, X, Y, Z) to a predicted last frame of the same shape."""
    if frame.ndim != 4 or frame.shape[0] != 1 or anatomy.shape != frame.shape:
        raise ShapeError(f"generator: frame {frame.shape} and anatomy {anatomy.shape} must both be (1, X, Y, Z)")
    div = 2**cfg.levels
    if any(n % div for n in frame.shape[1:]):
        raise ShapeError(f"generator: spatial extents {frame.shape[1:]} not divisible by 2**levels = {div}")
    if not cfg.use_mask:
        anatomy = Tensor(np.zeros(frame.shape))
    x = ops.concat([frame, anatomy])
    skips = [ops.relu(ops.conv3d(x, params["gen.enc0.w"], params["gen.enc0.b"], padding=1))]
    for lv in range(1, cfg.levels + 1):
        skips.append(ops.relu(ops.conv3d(skips[-1], params[f"gen.enc{lv}.w"], params[f"gen.enc{lv}.b"], stride=2, padding=1)))
    y = skips[-1]
    if cfg.use_film:
        if t is None:
            raise ValueError("generator: use_film requires a TemporalInput")
        y = film(y, temporal_encode(t, params))
    for lv in range(cfg.levels - 1, -1, -1):
        up = ops.relu(_upsample(y, params, lv, cfg.upsample))
        y = ops.relu(ops.conv3d(ops.concat([up, skips[lv]]), params[f"gen.dec{lv}.w"], params[f"gen.dec{lv}.b"], padding=1))
    return ops.tanh(ops.conv3d(y, params["gen.out.w"], params["gen.out.b"]))


def discriminator_forward(volume: Tensor, params: Params, cfg: DiscriminatorConfig | None = None) -> Tensor:
    """Scalar real/fake logit for a (1, X, Y, Z) volume."""
    cfg = cfg or DiscriminatorConfig()
    div = 2**cfg.levels
    if volume.ndim != 4 or any(n % div for n in volume.shape[1:]):
        raise ShapeError(f"discriminator: input {volume.shape} must be (1, X, Y, Z) with extents divisible by {div}")
    x = volume
    for lv in range(cfg.levels):
        x = ops.leaky_relu(ops.conv3d(x, params[f"disc.conv{lv}.w"], params[f"disc.conv{lv}.b"], stride=2, padding=1), cfg.slope)
    flat = ops.flatten(x)
    w = params["disc.fc.w"]
    if w.shape[1] != flat.shape[0]:
        raise ShapeError(f"discriminator: built for {w.shape[1]} patch features, got {flat.shape[0]}")
    return ops.reshape(ops.linear(flat, w, params["disc.fc.b"]), ())


# ----------------------------------------------------------------- checkpoint helpers


def config_to_meta(prefix: str, cfg) -> dict[str, np.ndarray]:
    """Encode numeric/bool config fields as rank-0 checkpoint entries."""
    out = {}
    for k, v in asdict(cfg).items():
        if isinstance(v, str):
            v = {"transposed": 0.0, "nearest": 1.0}[v]
        out[f"meta.{prefix}.{k}"] = np.array(float(v))
    return out


def config_from_meta(prefix: str, cls, weights: dict[str, np.ndarray]):
    kwargs = {}
    for f in fields(cls):
        key = f"meta.{prefix}.{f.name}"
        if key not in weights:
            continue
        val = float(weights[key])
        if f.name == "upsample":
            kwargs[f.name] = "nearest" if val == 1.0 else "transposed"
        elif f.type in ("bool", bool):
            kwargs[f.name] = bool(val)
        elif f.type in ("int", int):
            kwargs[f.name] = int(val)
        else:
            kwargs[f.name] = val
    return cls(**kwargs)


def params_from_weights(weights: dict[str, np.ndarray], prefixes: Sequence[str]) -> Params:
    return {k: Tensor(v, requires_grad=True) for k, v in weights.items() if k.split(".")[0] in prefixes}
