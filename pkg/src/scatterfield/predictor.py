"""The scatter predictor: six layer-fusion stacks over sampled template features,
a merge head, the log-space loss, training and inference.

Each stack handles one feature type (density, phase or transmittance) for one
template kind (diffuse or highlight) and walks the template's layers from the
innermost outward.  Inside a layer, points are sorted by value and summarized
by their mean and maximum, so the prediction does not depend on the order of
points within a layer.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .phase import PhaseModel
from .scene import normalize
from .templates import DIFFUSE_COUNTS, HIGHLIGHT_COUNTS
from .volume_grid import trilinear_field

DEFAULT_GAMMA = 4.0
FEATURE_TYPES = ("density", "phase", "transmittance")
# column of each feature type in a feature block (density, transmittance, phase)
FEATURE_COLUMN = {"density": 0, "transmittance": 1, "phase": 2}
KINDS = ("diffuse", "highlight")
CFG_WIDTH = 7  # three asymmetry values (zero padded), three albedos, alpha


# --- configuration parameters and the output encoding ------------------------

@dataclass(frozen=True)
class ConfigParams:
    g_params: tuple
    albedo: tuple
    alpha: float

    def vector(self) -> np.ndarray:
        g = list(self.g_params) + [0.0] * (3 - len(self.g_params))
        return np.array(g + list(self.albedo) + [self.alpha])


def view_light_angle(omegas, light) -> np.ndarray:
    om = normalize(np.asarray(omegas, dtype=np.float64).reshape(-1, 3))
    return np.arccos(np.clip(om @ np.asarray(light, dtype=np.float64), -1.0, 1.0))


def config_vectors(phase: PhaseModel, albedo, omegas, light) -> np.ndarray:
    """Per-center conditioning vectors, shape (n, 7)."""
    gs = list(phase.gs)
    if len(gs) > 3:
        raise ValueError("at most three phase lobes are supported")
    alpha = view_light_angle(omegas, light)
    base = ConfigParams(tuple(gs), tuple(np.asarray(albedo, dtype=np.float64)), 0.0).vector()
    out = np.repeat(base[None], len(alpha), axis=0)
    out[:, -1] = alpha
    return out


def encode(F, albedo, gamma=DEFAULT_GAMMA):
    """``y = log(F / albedo^gamma + 1)``."""
    return np.log(np.asarray(F, dtype=np.float64) / np.asarray(albedo, dtype=np.float64) ** gamma + 1.0)


def decode(y, albedo, gamma=DEFAULT_GAMMA):
    """``F = albedo^gamma (e^y - 1)``."""
    return np.asarray(albedo, dtype=np.float64) ** gamma * np.expm1(np.asarray(y, dtype=np.float64))


def loss_LS(pred, label, albedo, gamma=DEFAULT_GAMMA) -> float:
    """Mean over batch and channels of the squared difference of log-compressed values."""
    label = np.asarray(label, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if np.any(label < 0):
        raise ValueError("labels must be non-negative")
    albedo = np.asarray(albedo, dtype=np.float64)
    if np.any(albedo <= 0) or np.any(albedo >= 1):
        raise ValueError("albedo must be in (0, 1) for the log-space loss")
    return float(np.mean((encode(pred, albedo, gamma) - encode(label, albedo, gamma)) ** 2))


# --- network -----------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    diffuse_counts: tuple = DIFFUSE_COUNTS
    highlight_counts: tuple = HIGHLIGHT_COUNTS
    hidden: int = 32
    merge: int = 64
    head: int = 64
    gamma: float = DEFAULT_GAMMA
    attention: str = "learned"
    cfg_every_layer: bool = False

    def counts(self, kind: str) -> tuple:
        return tuple(self.diffuse_counts if kind == "diffuse" else self.highlight_counts)

    def to_json(self) -> str:
        d = asdict(self)
        d["diffuse_counts"] = list(self.diffuse_counts)
        d["highlight_counts"] = list(self.highlight_counts)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        d = json.loads(text)
        d["diffuse_counts"] = tuple(d["diffuse_counts"])
        d["highlight_counts"] = tuple(d["highlight_counts"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


PHASE_FLOOR = 1e-8


def transform_features(x) -> np.ndarray:
    """Phase features span many orders of magnitude; the network sees their logarithm."""
    x = np.array(x, dtype=np.float64)
    x[..., FEATURE_COLUMN["phase"]] = np.log(np.maximum(x[..., FEATURE_COLUMN["phase"]], 0.0) + PHASE_FLOOR)
    return x


def _stack(kind, ftype):
    return f"{kind}.{ftype}"


def identity_stats(arch: Architecture) -> dict:
    """Input standardization that leaves features unchanged."""
    stats = {}
    for kind in KINDS:
        n = len(arch.counts(kind))
        stats[f"{kind}.mean"] = np.zeros((n, 3))
        stats[f"{kind}.std"] = np.ones((n, 3))
    stats["cfg.mean"] = np.zeros(CFG_WIDTH)
    stats["cfg.std"] = np.ones(CFG_WIDTH)
    return stats


class CountMismatchError(ValueError):
    pass


@dataclass
class BackboneNetwork:
    arch: Architecture
    params: nn.Params
    stats: dict = field(default_factory=dict)

    @classmethod
    def create(cls, arch: Architecture | None = None, seed: int = 0, dtype=np.float32) -> "BackboneNetwork":
        arch = arch or Architecture()
        rng = np.random.default_rng([int(seed), 11])
        p = nn.Params()
        H = arch.hidden
        for kind in KINDS:
            counts = arch.counts(kind)
            widths = [n + 2 for n in counts]
            for ftype in FEATURE_TYPES:
                s = _stack(kind, ftype)
                nn.add_dense(p, f"{s}.in", widths[0] + CFG_WIDTH, H, rng, dtype)
                for i in range(len(counts)):
                    b = f"{s}.b{i}"
                    if arch.attention == "learned":
                        nn.add_attention(p, f"{b}.se", rng, dtype)
                    nxt = widths[i + 1] if i + 1 < len(counts) else H
                    nn.add_dense(p, f"{b}.fc1", H, nxt, rng, dtype)
                    # residual branches start small so the stacked sum stays well scaled
                    nn.add_dense(p, f"{b}.fc2", nxt, H, rng, dtype, scale=1.0 / math.sqrt(len(counts)))
                    if arch.cfg_every_layer and i > 0:
                        nn.add_dense(p, f"{b}.cfg", CFG_WIDTH, H, rng, dtype)
        for ftype in FEATURE_TYPES:
            nn.add_dense(p, f"merge.{ftype}", 2 * H, arch.merge, rng, dtype)
        nn.add_dense(p, "merge.all", 3 * arch.merge, arch.head, rng, dtype)
        nn.add_dense(p, "head.0", arch.head, arch.head, rng, dtype)
        nn.add_dense(p, "head.1", arch.head, arch.head, rng, dtype)
        # small weights and a positive bias keep the ReLU output active at the start
        nn.add_dense(p, "head.2", arch.head, 3, rng, dtype, scale=0.01, bias=0.1)
        return cls(arch, p, identity_stats(arch))

    @property
    def dtype(self):
        return next(iter(self.params.arrays.values())).dtype

    def astype(self, dtype) -> "BackboneNetwork":
        return BackboneNetwork(self.arch, self.params.astype(dtype), {k: v.copy() for k, v in self.stats.items()})

    # inputs ------------------------------------------------------------------
    def prepare(self, diffuse, highlight, cfg):
        """Standardize and pool raw feature blocks into the tape-free network inputs."""
        dt = self.dtype
        blocks = {"diffuse": transform_features(diffuse), "highlight": transform_features(highlight)}
        cfg = np.asarray(cfg, dtype=np.float64).reshape(-1, CFG_WIDTH)
        B = cfg.shape[0]
        out = {"cfg": ((cfg - self.stats["cfg.mean"]) / self.stats["cfg.std"]).astype(dt)}
        for kind in KINDS:
            counts = self.arch.counts(kind)
            x = blocks[kind]
            if x.ndim != 3 or x.shape[0] != B or x.shape[1] != sum(counts) or x.shape[2] != 3:
                raise CountMismatchError(
                    f"{kind} block has shape {x.shape}, network expects ({B}, {sum(counts)}, 3)")
            edges = np.concatenate([[0], np.cumsum(counts)])
            mean, std = self.stats[f"{kind}.mean"], self.stats[f"{kind}.std"]
            layers = []
            for i in range(len(counts)):
                z = (x[:, edges[i]:edges[i + 1], :] - mean[i]) / std[i]  # (B, n_i, 3)
                per_type = {}
                for ftype in FEATURE_TYPES:
                    col = z[:, :, FEATURE_COLUMN[ftype]]
                    srt = np.sort(col, axis=1)
                    per_type[ftype] = np.concatenate(
                        [srt, col.mean(axis=1, keepdims=True), col.max(axis=1, keepdims=True)], axis=1).astype(dt)
                per_type["_raw"] = z.astype(dt)
                layers.append(per_type)
            out[kind] = layers
        out["g"] = self.stats.get("g_eff", np.zeros(1))
        out["alpha"] = cfg[:, -1:]
        return out

    # forward ----------------------------------------------------------------
    def forward_prepared(self, inp, trace: list | None = None) -> nn.Tensor:
        p = self.params
        p.reset()
        dt = self.dtype
        B = inp["cfg"].shape[0]
        cfg = nn.Tensor(inp["cfg"])
        g_col = nn.Tensor(np.full((B, 1), float(np.asarray(inp["g"]).reshape(-1)[0]), dtype=dt))
        a_col = nn.Tensor(np.asarray(inp["alpha"], dtype=dt))
        merged = []
        for ftype in FEATURE_TYPES:
            kind_out = []
            for kind in KINDS:
                layers = inp[kind]
                s = _stack(kind, ftype)
                z = nn.relu(nn.apply_dense(p, f"{s}.in", nn.concat([nn.Tensor(layers[0][ftype]), cfg])))
                t_idx = nn.ATTENTION_TYPES.index(ftype)
                for i, layer in enumerate(layers):
                    if trace is not None:
                        trace.append((ftype, kind, i))
                    raw = layer["_raw"]
                    v = nn.attention_input(nn.Tensor(raw[:, :, 0]), nn.Tensor(raw[:, :, 2]),
                                           nn.Tensor(raw[:, :, 1]), g_col, a_col)
                    w = nn.attention_weight(v, p, f"{s}.b{i}.se", self.arch.attention)
                    a = nn.attention_apply(z, w, t_idx)
                    b = nn.apply_dense(p, f"{s}.b{i}.fc1", a)
                    if i + 1 < len(layers):
                        b = nn.add(b, nn.Tensor(layers[i + 1][ftype]))
                    d = nn.relu(nn.apply_dense(p, f"{s}.b{i}.fc2", b))
                    if self.arch.cfg_every_layer and i > 0:
                        d = nn.add(d, nn.apply_dense(p, f"{s}.b{i}.cfg", cfg))
                    z = nn.add(d, z)
                kind_out.append(z)
            merged.append(nn.relu(nn.apply_dense(p, f"merge.{ftype}", nn.concat(kind_out))))
        h = nn.relu(nn.apply_dense(p, "merge.all", nn.concat(merged)))
        h = nn.relu(nn.apply_dense(p, "head.0", h))
        h = nn.relu(nn.apply_dense(p, "head.1", h))
        return nn.relu(nn.apply_dense(p, "head.2", h))

    def forward(self, diffuse, highlight, cfg, trace: list | None = None) -> nn.Tensor:
        """Log-compressed prediction ``y`` (B, 3) as a tape tensor."""
        return self.forward_prepared(self.prepare(diffuse, highlight, cfg), trace)

    def predict_y(self, diffuse, highlight, cfg, batch: int = 1024) -> np.ndarray:
        n = np.asarray(cfg).reshape(-1, CFG_WIDTH).shape[0]
        out = np.empty((n, 3), dtype=np.float64)
        for a in range(0, n, batch):
            b = min(n, a + batch)
            out[a:b] = self.forward(diffuse[a:b], highlight[a:b], np.asarray(cfg)[a:b]).value
        self.params.reset()
        return out

    def predict(self, diffuse, highlight, cfg, albedo, batch: int = 1024) -> np.ndarray:
        """Decoded in-scatter estimates, shape (n, 3), never negative."""
        return np.maximum(decode(self.predict_y(diffuse, highlight, cfg, batch), albedo, self.arch.gamma), 0.0)

    def digest(self) -> str:
        h = hashlib.sha256(self.arch.digest().encode())
        for name in sorted(self.params.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params.arrays[name], "<f4").tobytes())
        for name in sorted(self.stats):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.stats[name], "<f4").tobytes())
        return h.hexdigest()


def fit_stats(net: BackboneNetwork, diffuse, highlight, cfg, g_eff: float) -> None:
    """Per-layer, per-type standardization from training features (in place)."""
    for kind, x in (("diffuse", diffuse), ("highlight", highlight)):
        counts = net.arch.counts(kind)
        edges = np.concatenate([[0], np.cumsum(counts)])
        x = transform_features(x)
        mean = np.zeros((len(counts), 3))
        std = np.ones((len(counts), 3))
        for i in range(len(counts)):
            sl = x[:, edges[i]:edges[i + 1], :].reshape(-1, 3)
            mean[i] = sl.mean(axis=0)
            std[i] = np.maximum(sl.std(axis=0), 1e-6 * np.maximum(np.abs(mean[i]), 1e-12) + 1e-12)
        net.stats[f"{kind}.mean"] = mean
        net.stats[f"{kind}.std"] = std
    cfg = np.asarray(cfg, dtype=np.float64)
    sd = cfg.std(axis=0)
    net.stats["cfg.mean"] = cfg.mean(axis=0)
    net.stats["cfg.std"] = np.where(sd > 1e-9, sd, 1.0)
    net.stats["g_eff"] = np.array([float(g_eff)])
    # stored as f32 in .vnet files; round now so reloaded networks predict identically
    for k in net.stats:
        net.stats[k] = np.asarray(net.stats[k], dtype=np.float32).astype(np.float64)


# --- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0
    eval_every: int = 50


@dataclass
class TrainResult:
    net: BackboneNetwork
    history: list  # rows of (step, train_loss, val_loss)
    train_index: np.ndarray
    val_index: np.ndarray

    @property
    def initial_loss(self) -> float:
        return self.history[0][1]

    @property
    def final_loss(self) -> float:
        return self.history[-1][1]


class NonFiniteLossError(FloatingPointError):
    pass


def validation_mask(n: int, fraction: float) -> np.ndarray:
    """Deterministic split by hashing each center index."""
    if fraction <= 0:
        return np.zeros(n, dtype=bool)
    buckets = np.array([int.from_bytes(hashlib.sha256(str(i).encode()).digest()[:4], "little") % 1000
                        for i in range(n)])
    return buckets < int(round(fraction * 1000))


def dataset_inputs(data):
    """Feature blocks, conditioning vectors and albedo of a dataset."""
    phase = PhaseModel.from_dict(data.manifest["phase"])
    albedo = np.asarray(data.manifest["albedo"], dtype=np.float64)
    light = np.asarray(data.manifest["light"], dtype=np.float64)
    cfg = config_vectors(phase, albedo, data.omegas, light)
    return data.diffuse, data.highlight, cfg, albedo, phase


def train(data, net: BackboneNetwork | None = None, hp: TrainConfig | None = None,
          arch: Architecture | None = None, progress=None) -> TrainResult:
    """Adam on squared error in log-compressed space over the usable entries of ``data``."""
    hp = hp or TrainConfig()
    if len(data) == 0:
        raise ValueError("dataset is empty")
    diffuse, highlight, cfg, albedo, phase = dataset_inputs(data)
    if np.any(albedo <= 0) or np.any(albedo >= 1):
        raise ValueError("training needs albedo in (0, 1)")
    net = net or BackboneNetwork.create(arch, hp.seed)
    if diffuse.shape[1] != sum(net.arch.diffuse_counts) or highlight.shape[1] != sum(net.arch.highlight_counts):
        raise CountMismatchError("dataset template counts do not match the network")
    y_all = encode(np.maximum(data.labels, 0.0), albedo, net.arch.gamma).astype(net.dtype)
    usable = np.nonzero(data.usable())[0]
    val_mask = validation_mask(len(data), hp.val_fraction)[usable]
    train_idx, val_idx = usable[~val_mask], usable[val_mask]
    if len(train_idx) == 0:
        train_idx, val_idx = usable, usable[:0]
    fit_stats(net, diffuse[train_idx], highlight[train_idx], cfg[train_idx], phase.effective_g)
    prepared = net.prepare(diffuse, highlight, cfg)

    def take(idx):
        sub = {"cfg": prepared["cfg"][idx], "g": prepared["g"], "alpha": prepared["alpha"][idx]}
        for kind in KINDS:
            sub[kind] = [{k: v[idx] for k, v in layer.items()} for layer in prepared[kind]]
        return sub

    def full_loss(idx):
        if len(idx) == 0:
            return float("nan")
        tot = 0.0
        for a in range(0, len(idx), 1024):
            part = idx[a:a + 1024]
            y = net.forward_prepared(take(part)).value
            tot += float(np.sum((y.astype(np.float64) - y_all[part]) ** 2))
        net.params.reset()
        return tot / (3 * len(idx))

    state = nn.TrainState(net.params.arrays, lr=hp.lr)
    rng = np.random.default_rng([int(hp.seed), 13])
    history = [(0, full_loss(train_idx), full_loss(val_idx))]
    order = rng.permutation(train_idx)
    pos = 0
    for step in range(1, hp.steps + 1):
        if pos + hp.batch > len(order):
            order = rng.permutation(train_idx)
            pos = 0
        idx = order[pos:pos + hp.batch]
        pos += hp.batch
        y = net.forward_prepared(take(idx))
        loss = nn.mse(y, y_all[idx])
        if not np.isfinite(loss.value):
            raise NonFiniteLossError(f"loss became {loss.value} at step {step}")
        loss.backward()
        nn.adam_step(state, net.params.grads())
        if step % hp.eval_every == 0 or step == hp.steps:
            row = (step, full_loss(train_idx), full_loss(val_idx))
            if not np.isfinite(row[1]):
                raise NonFiniteLossError(f"training loss became {row[1]} at step {step}")
            history.append(row)
            if progress:
                progress(row)
    net.params.reset()
    return TrainResult(net, history, train_idx, val_idx)


# --- inference and rendering -------------------------------------------------

def predict_field(ctx, net: BackboneNetwork, points, omegas, batch: int = 1024) -> np.ndarray:
    """Network estimates of the in-scatter at arbitrary centers and view directions."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    omegas = normalize(np.asarray(omegas, dtype=np.float64).reshape(-1, 3))
    if len(points) == 0:
        return np.zeros((0, 3))
    out = np.empty((len(points), 3))
    for a in range(0, len(points), batch):
        b = min(len(points), a + batch)
        d, h = ctx.sample(points[a:b], omegas[a:b])
        cfg = config_vectors(ctx.medium.phase, ctx.medium.albedo, omegas[a:b], ctx.light.direction)
        out[a:b] = net.predict(d, h, cfg, ctx.medium.albedo, batch)
    return out


def field_centers(grid, level: int):
    """Voxel centers of a coarser grid level whose neighborhood holds density."""
    f = 2 ** level
    dims = np.asarray(grid.dims) // f
    if np.any(dims < 1):
        raise ValueError(f"level {level} is coarser than the grid")
    occ = grid.values.reshape(dims[0], f, dims[1], f, dims[2], f).max(axis=(1, 3, 5)) > 0
    pad = np.pad(occ, 1)
    near = np.zeros_like(occ)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                near |= pad[dx:dx + dims[0], dy:dy + dims[1], dz:dz + dims[2]]
    idx = np.argwhere(near)
    vs = grid.voxel_size * f
    return idx, grid.origin + (idx + 0.5) * vs, vs, tuple(int(d) for d in dims)


def render_neural(ctx, net: BackboneNetwork, camera, background=(0.0, 0.0, 0.0), field_level: int | None = 2,
                  step=None):
    """Ray-marched image with the network's in-scatter estimates in place of path tracing.

    With ``field_level`` set, estimates are made once per voxel of that
    coarser level (view direction from the camera) and interpolated at
    the march samples; with ``None`` every march sample is evaluated.
    """
    from .rte import march_samples

    medium = ctx.medium
    plan = march_samples(medium, camera, step)
    if len(plan.points) == 0:
        return plan.accumulate(np.zeros((0, 3)), background)
    if field_level is not None:
        # keep at least two voxels per axis on the field grid
        field_level = max(0, min(field_level, int(math.log2(min(medium.grid.dims))) - 1))
    if field_level is None:
        F = predict_field(ctx, net, plan.points, plan.sample_views)
    else:
        idx, centers, vs, dims = field_centers(medium.grid, field_level)
        vals = predict_field(ctx, net, centers, centers - camera.position)
        volume = np.zeros(dims + (3,))
        volume[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
        F = np.stack([trilinear_field(volume[..., c], medium.grid.origin, vs, plan.points) for c in range(3)], -1)
    return plan.accumulate(F, background)


# --- .vnet container ---------------------------------------------------------

VNET_MAGIC = b"VNET"
VNET_VERSION = 1


class NetworkFormatError(ValueError):
    pass


def save_network(net: BackboneNetwork, path) -> None:
    arch = net.arch.to_json().encode()
    blocks = [(name, net.params.arrays[name]) for name in sorted(net.params.arrays)]
    blocks += [(f"stats:{name}", net.stats[name]) for name in sorted(net.stats)]
    parts = [struct.pack("<4sI", VNET_MAGIC, VNET_VERSION), bytes.fromhex(net.arch.digest()),
             struct.pack("<I", len(arch)), arch, struct.pack("<I", len(blocks))]
    for name, arr in blocks:
        nb = name.encode()
        a = np.asarray(arr)
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
                     + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, "<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_network(path, dtype=np.float32) -> BackboneNetwork:
    raw = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        s = struct.Struct(fmt)
        if off + s.size > len(raw):
            raise NetworkFormatError("truncated .vnet file")
        v = s.unpack_from(raw, off)
        off += s.size
        return v

    magic, version = take("<4sI")
    if magic != VNET_MAGIC or version != VNET_VERSION:
        raise NetworkFormatError(f"not a v{VNET_VERSION} .vnet file")
    digest = raw[off:off + 32].hex()
    off += 32
    (alen,) = take("<I")
    if off + alen > len(raw):
        raise NetworkFormatError("truncated .vnet architecture block")
    try:
        arch = Architecture.from_json(raw[off:off + alen].decode())
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise NetworkFormatError(f"unreadable .vnet architecture: {exc}") from exc
    off += alen
    if arch.digest() != digest:
        raise NetworkFormatError("architecture digest does not match the stored architecture")
    (count,) = take("<I")
    params, stats = {}, {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(raw):
            raise NetworkFormatError("truncated .vnet parameter block")
        a = np.frombuffer(raw, "<f4", size, off).reshape(shape)
        off += 4 * size
        if name.startswith("stats:"):
            stats[name[6:]] = a.astype(np.float64)
        else:
            params[name] = a.astype(dtype)
    if off != len(raw):
        raise NetworkFormatError(f"{len(raw) - off} trailing bytes in .vnet")
    expected = BackboneNetwork.create(arch, 0, dtype).params.arrays
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise NetworkFormatError("parameter blocks do not match the architecture")
    return BackboneNetwork(arch, nn.Params(params), stats)
