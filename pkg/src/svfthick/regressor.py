"""Small 3D encoder-decoder that regresses a velocity field from (WM, WM+GM).

The network is written directly against numpy with a hand-rolled backward
pass, which keeps training on a CPU reproducible bit for bit.

Layout for ``pooling_steps = P`` and ``F`` features::

    enc{l}_a, enc{l}_b   3x3x3 conv + leaky ReLU        (skip l)
    down{l}              3x3x3 stride-2 conv + leaky ReLU
    bott_a, bott_b       3x3x3 conv + leaky ReLU
    up{l}                nearest 2x upsample, 3x3x3 conv + leaky ReLU
    dec{l}               concat(up, skip l), 3x3x3 conv + leaky ReLU
    head                 1x1x1 conv, z = gain * head(h) + bias
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .loss import LossConfig, registration_loss
from .metrics import DegenerateDataError, icc_2_1
from .optim import (AdamState, DivergenceError, IterativeConfig, RegistrationResult, adam_step,
                    finish_registration, presmooth, register_iterative)
from .thickness import thickness_report
from .volume import GridMeta, as_array

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCKP\x00\x00\x00\x01"


@dataclass(frozen=True)
class UnetSpec:
    pooling_steps: int = 2
    base_features: int = 8
    in_channels: int = 2
    out_channels: int = 3
    slope: float = 0.2
    init_gain: float = 0.1

    def __post_init__(self):
        if self.pooling_steps < 1 or self.base_features < 1:
            raise ValueError("pooling_steps and base_features must be positive")
        if self.in_channels != 2 or self.out_channels != 3:
            raise ValueError("the regressor maps 2 input channels to 3 velocity components")

    @property
    def multiple(self) -> int:
        return 2 ** self.pooling_steps

    def layers(self):
        """``(name, in_channels, out_channels, kernel, stride)`` in forward order."""
        f = self.base_features
        out = []
        for lvl in range(self.pooling_steps):
            out.append((f"enc{lvl}_a", self.in_channels if lvl == 0 else f, f, 3, 1))
            out.append((f"enc{lvl}_b", f, f, 3, 1))
            out.append((f"down{lvl}", f, f, 3, 2))
        out.append(("bott_a", f, f, 3, 1))
        out.append(("bott_b", f, f, 3, 1))
        for lvl in reversed(range(self.pooling_steps)):
            out.append((f"up{lvl}", f, f, 3, 1))
            out.append((f"dec{lvl}", 2 * f, f, 3, 1))
        return out


@dataclass
class UnetModel:
    spec: UnetSpec
    params: dict

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "UnetModel":
        return UnetModel(self.spec, {k: v.copy() for k, v in self.params.items()})


def expected_shapes(spec: UnetSpec) -> dict:
    shapes = {}
    for name, cin, cout, k, _ in spec.layers():
        shapes[f"{name}.w"] = (cout, cin, k, k, k)
        shapes[f"{name}.b"] = (cout,)
    shapes["head.w"] = (spec.out_channels, spec.base_features, 1, 1, 1)
    shapes["head.b"] = (spec.out_channels,)
    shapes["gain"] = ()
    return shapes


def init_model(spec: UnetSpec = UnetSpec(), seed: int = 0) -> UnetModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in expected_shapes(spec).items():
        if name == "gain":
            params[name] = np.array(spec.init_gain)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name == "head.w" else 2.0 / (1.0 + spec.slope ** 2)
            params[name] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
    return UnetModel(spec, params)


def _check_model(model: UnetModel):
    shapes = expected_shapes(model.spec)
    if list(model.params) != list(shapes):
        raise ValueError("parameter names do not match the architecture")
    for name, shape in shapes.items():
        p = model.params[name]
        if p.shape != shape:
            raise ValueError(f"parameter {name} has shape {p.shape}, expected {shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"parameter {name} is not finite")


# --------------------------------------------------------------------- forward / backward


@dataclass
class UnetTape:
    spec: UnetSpec
    params: dict
    batched: bool
    x: np.ndarray
    convs: dict = field(default_factory=dict)   # name -> (input, pre-activation, stride)
    head_in: np.ndarray | None = None
    head_out: np.ndarray | None = None


def _stack_inputs(wm, wmgm, multiple: int):
    wm = np.asarray(as_array(wm), dtype=np.float64)
    wmgm = np.asarray(as_array(wmgm), dtype=np.float64)
    if wm.shape != wmgm.shape:
        raise ValueError(f"dimension mismatch: {wm.shape} vs {wmgm.shape}")
    batched = wm.ndim == 4
    x = np.stack([wm, wmgm], axis=-1)
    if not batched:
        x = x[None]
    if x.ndim != 5:
        raise ValueError(f"inputs must be 3D volumes or batches of them, got {wm.shape}")
    if any(n % multiple for n in x.shape[1:4]):
        raise ValueError(f"patch dims {x.shape[1:4]} must be divisible by {multiple}")
    return x, batched


def unet_forward(model: UnetModel, wm_patch, wmgm_patch):
    """Velocity field for a patch (or a batch of patches). Returns ``(z, tape)``."""
    spec = model.spec
    p = model.params
    x, batched = _stack_inputs(wm_patch, wmgm_patch, spec.multiple)
    tape = UnetTape(spec, dict(p), batched, x)

    def conv_act(name, h, stride=1):
        pre = nn.conv3d(h, p[f"{name}.w"], p[f"{name}.b"], stride)
        tape.convs[name] = (h, pre, stride)
        return nn.leaky_relu(pre, spec.slope)

    h = x
    skips = []
    for lvl in range(spec.pooling_steps):
        h = conv_act(f"enc{lvl}_a", h)
        h = conv_act(f"enc{lvl}_b", h)
        skips.append(h)
        h = conv_act(f"down{lvl}", h, stride=2)
    h = conv_act("bott_a", h)
    h = conv_act("bott_b", h)
    for lvl in reversed(range(spec.pooling_steps)):
        h = conv_act(f"up{lvl}", nn.upsample2(h))
        h = conv_act(f"dec{lvl}", np.concatenate([h, skips[lvl]], axis=-1))
    tape.head_in = h
    tape.head_out = nn.conv3d(h, p["head.w"], np.zeros(spec.out_channels))
    z = p["gain"] * tape.head_out + p["head.b"]
    return (z if batched else z[0]), tape


def unet_backward(tape: UnetTape, g_z):
    """Reverse pass through the recorded forward call.

    Returns ``(param_grads, (g_wm, g_wmgm))`` with gradients keyed like the
    model parameters.
    """
    spec = tape.spec
    p = tape.params
    if tape.head_out is None:
        raise ValueError("tape holds no completed forward pass")
    g_z = np.asarray(g_z, dtype=np.float64)
    if not tape.batched:
        g_z = g_z[None]
    if g_z.shape != tape.head_out.shape:
        raise ValueError(f"gradient shape {g_z.shape} does not match output {tape.head_out.shape}")
    grads = {}

    def conv_act_back(name, g):
        h, pre, stride = tape.convs[name]
        g_pre = nn.leaky_relu_backward(pre, g, spec.slope)
        g_h, grads[f"{name}.w"], grads[f"{name}.b"] = nn.conv3d_backward(h, p[f"{name}.w"], g_pre, stride)
        return g_h

    grads["head.b"] = g_z.sum(axis=(0, 1, 2, 3))
    grads["gain"] = np.array(np.sum(g_z * tape.head_out))
    g, grads["head.w"], _ = nn.conv3d_backward(tape.head_in, p["head.w"], p["gain"] * g_z)
    f = spec.base_features
    g_skips = [None] * spec.pooling_steps
    for lvl in range(spec.pooling_steps):
        g_cat = conv_act_back(f"dec{lvl}", g)
        g_skips[lvl] = g_cat[..., f:]
        g = nn.upsample2_backward(conv_act_back(f"up{lvl}", g_cat[..., :f]))
    g = conv_act_back("bott_b", g)
    g = conv_act_back("bott_a", g)
    for lvl in reversed(range(spec.pooling_steps)):
        g = conv_act_back(f"down{lvl}", g) + g_skips[lvl]
        g = conv_act_back(f"enc{lvl}_b", g)
        g = conv_act_back(f"enc{lvl}_a", g)
    if not tape.batched:
        g = g[0]
    ordered = {k: grads[k] for k in p}
    return ordered, (g[..., 0], g[..., 1])


# --------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: UnetModel
    epoch: int
    val_loss: float | None = None
    metric: float | None = None       # ICC(2,1) against the iterative oracle; None when unavailable


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic, uint32 manifest length, JSON manifest, little-endian float64 payload."""
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += data.size
    manifest = json.dumps({
        "spec": dataclasses.asdict(ckpt.model.spec),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "metric": ckpt.metric,
        "dtype": "f64",
        "params": entries,
    }).encode("utf-8")
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    manifest = json.loads(raw[12:12 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=12 + hlen).astype(np.float64)
    params = {}
    for e in manifest["params"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"{path}: truncated payload for parameter {e['name']}")
        params[e["name"]] = chunk.reshape(e["shape"]).copy()
    model = UnetModel(UnetSpec(**manifest["spec"]), params)
    _check_model(model)
    return Checkpoint(model, manifest["epoch"], manifest["val_loss"], manifest["metric"])


# --------------------------------------------------------------------- inference


def _pad_to(x: np.ndarray, multiple: int) -> np.ndarray:
    pads = [(0, -n % multiple) for n in x.shape]
    return np.pad(x, pads) if any(p[1] for p in pads) else x


def predict_velocity(model: UnetModel, wm, wmgm) -> np.ndarray:
    """One forward pass on a full volume, zero-padded to the pooling multiple and cropped back."""
    wm = np.asarray(as_array(wm), dtype=np.float64)
    wmgm = np.asarray(as_array(wmgm), dtype=np.float64)
    shape = wm.shape
    z, _ = unet_forward(model, _pad_to(wm, model.spec.multiple), _pad_to(wmgm, model.spec.multiple))
    return np.ascontiguousarray(z[:shape[0], :shape[1], :shape[2]])


def infer_velocity(model: UnetModel, wm, wmgm, loss_cfg: LossConfig = LossConfig(),
                   image_sigma: float = 1.5) -> RegistrationResult:
    """Single-pass registration: predict z, integrate it both ways, report the loss."""
    z = predict_velocity(model, wm, wmgm)
    return finish_registration(presmooth(wm, image_sigma), presmooth(wmgm, image_sigma), z, loss_cfg)


def mean_global_thickness(result: RegistrationResult, wm, wmgm) -> float:
    meta = getattr(wm, "meta", None) or GridMeta(np.shape(as_array(wm)))
    return thickness_report(result, wm, wmgm, meta).global_mean_mm


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    unet: UnetSpec = field(default_factory=UnetSpec)
    patch_size: tuple = (32, 32, 32)
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-5
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 10
    checkpoint_every: int = 1
    seed: int = 0
    image_sigma: float = 1.5

    def __post_init__(self):
        patch = self.patch_size
        if isinstance(patch, (int, np.integer)):
            patch = (int(patch),) * 3
        patch = tuple(int(v) for v in patch)
        if len(patch) != 3 or any(v < 1 or v % self.unet.multiple for v in patch):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by {self.unet.multiple}")
        object.__setattr__(self, "patch_size", patch)
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1, epochs >= 0")


def _as_pair(pair):
    wm, wmgm = pair
    return np.asarray(as_array(wm), dtype=np.float64), np.asarray(as_array(wmgm), dtype=np.float64)


def validation_loss(model: UnetModel, pairs, cfg: TrainConfig) -> float:
    totals = []
    for wm, wmgm in pairs:
        z = predict_velocity(model, wm, wmgm)
        breakdown, _ = registration_loss(presmooth(wm, cfg.image_sigma), presmooth(wmgm, cfg.image_sigma), z, cfg.loss)
        totals.append(breakdown.total)
    return float(np.mean(totals))


def _icc_against(values, oracle) -> float | None:
    try:
        return icc_2_1(np.column_stack([values, oracle]))
    except DegenerateDataError:
        return None


def train_amortized(pairs, cfg: TrainConfig = TrainConfig(), val_pairs=None, oracle_thickness=None):
    """Unsupervised training on random patches of (WM, WM+GM) pairs.

    An epoch visits every training pair once, in a seeded random order, with
    one random patch per visit. Returns checkpoints for the initial model and
    every ``checkpoint_every`` epochs (always including the last). When
    ``oracle_thickness`` (mean global thickness per validation pair) is given,
    each checkpoint carries its ICC(2,1) against it.
    """
    train = [_as_pair(p) for p in pairs]
    if not train:
        raise ValueError("no training pairs")
    val = [p for p in (val_pairs or [])]
    patch = cfg.patch_size
    for wm, _ in train:
        if any(n < q for n, q in zip(wm.shape, patch)):
            raise ValueError(f"volume {wm.shape} is smaller than patch {patch}")
    smoothed = [(presmooth(wm, cfg.image_sigma), presmooth(wmgm, cfg.image_sigma)) for wm, wmgm in train]

    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    model = init_model(cfg.unet, int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(sample_seed)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    def snapshot(epoch):
        val_loss = validation_loss(model, val, cfg) if val else None
        metric = None
        if val and oracle_thickness is not None:
            values = [mean_global_thickness(infer_velocity(model, wm, wmgm, cfg.loss, cfg.image_sigma), wm, wmgm)
                      for wm, wmgm in val]
            metric = _icc_against(values, oracle_thickness)
        log.info("epoch %d: validation loss %s, ICC %s", epoch, val_loss, metric)
        return Checkpoint(model.copy(), epoch, val_loss, metric)

    checkpoints = [snapshot(0)]
    names = model.names
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            raw_wm, raw_wmgm, tgt = [], [], []
            for i in batch:
                corner = [int(rng.integers(0, n - q + 1)) for n, q in zip(train[i][0].shape, patch)]
                sl = tuple(slice(c, c + q) for c, q in zip(corner, patch))
                raw_wm.append(train[i][0][sl])
                raw_wmgm.append(train[i][1][sl])
                tgt.append((smoothed[i][0][sl], smoothed[i][1][sl]))
            z, tape = unet_forward(model, np.stack(raw_wm), np.stack(raw_wmgm))
            g_z = np.zeros_like(z)
            total = 0.0
            for b, (s_wm, s_wmgm) in enumerate(tgt):
                breakdown, g = registration_loss(s_wm, s_wmgm, z[b], cfg.loss)
                if not np.isfinite(breakdown.total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch start {start}: {breakdown.as_dict()}")
                total += breakdown.total / len(batch)
                g_z[b] = g / len(batch)
            grads, _ = unet_backward(tape, g_z)
            new, state = adam_step([model.params[k] for k in names], [grads[k] for k in names], state)
            model = UnetModel(model.spec, dict(zip(names, new)))
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            checkpoints.append(snapshot(epoch))
    return checkpoints


# --------------------------------------------------------------------- model selection


def oracle_thicknesses(pairs, cfg: IterativeConfig = IterativeConfig()) -> list[float]:
    """Mean global thickness of each pair under iterative registration."""
    return [mean_global_thickness(register_iterative(wm, wmgm, cfg), wm, wmgm) for wm, wmgm in pairs]


def select_model(checkpoints, pairs, oracle=None, measure=None, iterative_cfg: IterativeConfig = IterativeConfig()):
    """Checkpoint whose mean global thickness agrees best (ICC(2,1)) with the oracle.

    ``measure(model, wm, wmgm)`` returns a mean global thickness; it defaults
    to single-pass inference. ``oracle`` defaults to iterative registration of
    ``pairs``. Checkpoints with an undefined ICC are skipped; ties go to the
    later epoch. Every scored checkpoint gets its ``metric`` filled in.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if len(checkpoints) == 1:
        return checkpoints[0]
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("model selection needs at least 2 validation subjects")
    if measure is None:
        def measure(model, wm, wmgm):
            return mean_global_thickness(infer_velocity(model, wm, wmgm), wm, wmgm)
    if oracle is None:
        oracle = oracle_thicknesses(pairs, iterative_cfg)
    best = None
    for ckpt in checkpoints:
        values = [measure(ckpt.model, wm, wmgm) for wm, wmgm in pairs]
        ckpt.metric = _icc_against(values, oracle)
        if ckpt.metric is None:
            log.warning("checkpoint at epoch %d has an undefined ICC; skipped", ckpt.epoch)
            continue
        if best is None or (ckpt.metric, ckpt.epoch) >= (best.metric, best.epoch):
            best = ckpt
    if best is None:
        raise DegenerateDataError("no checkpoint has a defined ICC against the oracle")
    return best
