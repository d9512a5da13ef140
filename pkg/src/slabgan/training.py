"""Losses and the alternating four-phase training loop.

Each iteration runs, in order: a discriminator step on the two GAN
losses, a generator step on their generator parts, a slab-reconstruction
step updating only the slab encoder, and a global-reconstruction step
updating only the global encoder. One window draw per batch governs both
the low-resolution selector inside generation and the high-resolution
selector on real data.

Discriminator logits are raw; the losses use stable log-sigmoid forms.
The generator objective defaults to the non-saturating -log sigmoid(D(fake));
the saturating textbook form is available behind a flag.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .geometry import (SliceWindow, deterministic_windows, sample_r,
                       select_low, split_volume)
from .networks import ModelSet, NetConfig, build_model_set
from .optim import adam_step
from .tensor import Tensor, backward, no_grad


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the diagnostic loss report."""

    def __init__(self, step: int, report: dict):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class LossWeights:
    """Trade-off between the GAN losses and the reconstruction losses."""
    lambda1: float = 5.0
    lambda2: float = 5.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return T.tmean(T.tabs(T.sub(a, b)))


def gan_d_loss(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    """-log sigmoid(real) - log(1 - sigmoid(fake)), from raw logits."""
    return T.softplus(T.mul(logit_real, -1.0)).sum() + T.softplus(logit_fake).sum()


def gan_g_loss(logit_fake: Tensor, saturating: bool = False) -> Tensor:
    if saturating:
        return T.mul(T.softplus(logit_fake).sum(), -1.0)
    return T.softplus(T.mul(logit_fake, -1.0)).sum()


def class_loss(class_logits: Tensor, label: int) -> Tensor:
    """Auxiliary-classifier cross-entropy for one sample."""
    return T.cross_entropy_logits(class_logits, label)


def downsample_volume(vol: np.ndarray, factor: int) -> np.ndarray:
    """Trilinear box-style downsample of a (D, H, W) volume by 1/factor."""
    arr = vol[None] if vol.ndim == 3 else vol
    mats = [T.interp_matrix(n, n // factor, align_corners=False, dtype=arr.dtype)
            for n in arr.shape[1:]]
    out = arr
    for ax, m in zip((1, 2, 3), mats):
        out = T._apply_axis_matrix(out, m, ax)
    return out[0] if vol.ndim == 3 else out


@dataclass
class TrainState:
    """Everything the alternating optimization mutates."""
    nets: ModelSet
    rng: np.random.Generator
    weights: LossWeights
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    lr_e: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    step: int = 0
    saturating: bool = False
    deterministic_r: bool = False
    clip_norm: float | None = None

    @property
    def cfg(self) -> NetConfig:
        return self.nets.cfg

    @property
    def store(self):
        return self.nets.store


def init_train_state(cfg: NetConfig, seed: int, weights: LossWeights | None = None,
                     dtype=np.float32, **kw) -> TrainState:
    rng = np.random.default_rng(seed)
    nets = build_model_set(cfg, rng, dtype=dtype)
    return TrainState(nets=nets, rng=rng, weights=weights or LossWeights(), **kw)


def _only_trainable(state: TrainState, prefixes) -> None:
    store = state.store
    every = state.nets.generator_prefixes + state.nets.discriminator_prefixes \
        + state.nets.encoder_prefixes
    store.set_trainable(list(every), False)
    store.set_trainable(list(prefixes), True)


def _clip_grads(state: TrainState) -> None:
    if state.clip_norm is None:
        return
    total = 0.0
    grads = [p.grad for p in state.store.params.values()
             if p.requires_grad and p.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > state.clip_norm:
        scale = state.clip_norm / (norm + 1e-12)
        for g in grads:
            g *= scale


def _sample_latent(state: TrainState) -> np.ndarray:
    z = state.rng.standard_normal(state.cfg.latent_dim)
    return z.astype(state.store.params["g_a/dense/weight"].dtype)


def _latent_input(state: TrainState, z: np.ndarray, label: int | None) -> Tensor:
    cfg = state.cfg
    if cfg.num_classes:
        onehot = np.zeros(cfg.num_classes, dtype=z.dtype)
        onehot[label] = 1.0
        z = np.concatenate([z, onehot])
    return Tensor(z)


def _generate_windowed(state: TrainState, z: Tensor, w: SliceWindow, training=True):
    """Fake low-res volume and fake high-res slab sharing one trunk pass."""
    nets = state.nets
    a = nets.g_a(z, training)
    fake_low = nets.g_l(a, training)
    a_r = select_low(a, w)
    fake_sub = nets.g_h(a_r, training)
    return fake_low, fake_sub


def hierarchical_encode(state_or_nets, x_high: Tensor, training=True) -> Tensor:
    """Partition -> slab encoder -> concat -> global encoder."""
    nets = state_or_nets.nets if isinstance(state_or_nets, TrainState) else state_or_nets
    cfg = nets.cfg
    parts = split_volume(x_high, cfg.n_windows)
    feats = [nets.e_h(p, training) for p in parts]
    ahat = T.concat(feats, axis=1)
    return nets.e_g(ahat, training)


def _decode_from_latent(state: TrainState, zhat: Tensor, label: int | None, training=True):
    cfg = state.cfg
    if cfg.num_classes:
        onehot = np.zeros(cfg.num_classes, dtype=zhat.dtype)
        onehot[label] = 1.0
        zhat = T.concat([zhat, Tensor(onehot)], axis=0)
    return state.nets.g_a(zhat, training)


def _current_window(state: TrainState) -> SliceWindow:
    cfg = state.cfg
    if state.deterministic_r:
        # ablation variant: the window cycles one position per step
        cyc = deterministic_windows(cfg.low_resolution, cfg.subvol_depth_low,
                                    resolution_scale=4)
        return cyc[state.step % len(cyc)]
    return sample_r(cfg.low_resolution, cfg.subvol_depth_low, state.rng,
                    resolution_scale=4)


def gan_loss_pair(disc, real: Tensor, fake: Tensor, saturating: bool = False):
    """(d_loss, g_loss) for one discriminator on a real/fake pair.

    The discriminator loss sees the fake as a constant; the generator loss
    keeps the graph through the fake.
    """
    logit_real, _ = disc(real)
    logit_fake, _ = disc(fake.detach() if fake.requires_grad else fake)
    d_loss = gan_d_loss(logit_real, logit_fake)
    logit_fake_g, _ = disc(fake)
    g_loss = gan_g_loss(logit_fake_g, saturating)
    return d_loss, g_loss


def recon_slab_loss(state: TrainState, vol: np.ndarray, w: SliceWindow) -> Tensor:
    """L1 between a real high-res slab and its decode through the slab
    encoder; the caller freezes everything except e_h."""
    sub = Tensor(select_high_np(vol, w))
    ahat_r = state.nets.e_h(sub)
    rec = state.nets.g_h(ahat_r)
    return l1_loss(rec, sub)


def recon_global_loss(state: TrainState, vol: np.ndarray, low: np.ndarray,
                      w: SliceWindow, label: int | None = None) -> Tensor:
    """Low-res plus windowed high-res reconstruction error from the full
    hierarchical encoding; only e_g is meant to learn from it."""
    nets, cfg = state.nets, state.cfg
    x_high = Tensor(vol[None])
    with no_grad():
        parts = split_volume(x_high, cfg.n_windows)
        ahat = T.concat([nets.e_h(p) for p in parts], axis=1)
    zhat = nets.e_g(ahat)
    a = _decode_from_latent(state, zhat, label)
    rec_low = nets.g_l(a)
    rec_sub = nets.g_h(select_low(a, w))
    return T.add(l1_loss(rec_low, Tensor(low[None])),
                 l1_loss(rec_sub, Tensor(select_high_np(vol, w))))


ALL_PHASES = ("d", "g", "eh", "eg")


def train_step(state: TrainState, batch_high: list, labels: list | None = None,
               phases=ALL_PHASES) -> dict:
    """One full alternation over a batch of (D, H, W) volumes in [-1, 1].

    Returns the per-step loss report. Raises TrainingDiverged if any loss
    goes non-finite. ``phases`` restricts the alternation (testing hook).
    """
    nets, cfg, store = state.nets, state.cfg, state.store
    n = len(batch_high)
    conditional = bool(cfg.num_classes)
    if conditional and (labels is None or len(labels) != n):
        raise ValueError("conditional training needs one label per sample")
    labels = labels if conditional else [None] * n

    w = _current_window(state)
    lows = [downsample_volume(v, 4) for v in batch_high]
    report = {"step": state.step, "r": w.start}

    def _optimize(loss, lr):
        backward(loss)
        _clip_grads(state)
        adam_step(store, lr, state.beta1, state.beta2, state.adam_eps)
        store.zero_grads()

    # ---- phase 1: discriminators -------------------------------------------
    if "d" in phases:
        _only_trainable(state, nets.discriminator_prefixes)
        d_low_t = d_high_t = cls_t = 0.0
        loss = None
        for vol, low, lab in zip(batch_high, lows, labels):
            with no_grad():
                z = _latent_input(state, _sample_latent(state), lab)
                fake_low, fake_sub = _generate_windowed(state, z, w)
            real_low = Tensor(low[None])
            real_sub = Tensor(select_high_np(vol, w))
            lr_logit, lr_cls = nets.d_l(real_low)
            lf_logit, lf_cls = nets.d_l(fake_low)
            hr_logit, hr_cls = nets.d_h(real_sub)
            hf_logit, hf_cls = nets.d_h(fake_sub)
            d_low = gan_d_loss(lr_logit, lf_logit)
            d_high = gan_d_loss(hr_logit, hf_logit)
            term = T.add(d_low, d_high)
            if conditional:
                cl = class_loss(lr_cls, lab) + class_loss(lf_cls, lab) \
                    + class_loss(hr_cls, lab) + class_loss(hf_cls, lab)
                term = T.add(term, cl)
                cls_t += cl.item()
            d_low_t += d_low.item()
            d_high_t += d_high.item()
            loss = term if loss is None else T.add(loss, term)
        _optimize(T.mul(loss, 1.0 / n), state.lr_d)
        report["d_low"] = d_low_t / n
        report["d_high"] = d_high_t / n
        if conditional:
            report["class"] = cls_t / n

    # ---- phase 2: generators ------------------------------------------------
    if "g" in phases:
        _only_trainable(state, nets.generator_prefixes)
        g_low_t = g_high_t = 0.0
        loss = None
        for lab in labels:
            z = _latent_input(state, _sample_latent(state), lab)
            fake_low, fake_sub = _generate_windowed(state, z, w)
            lf_logit, lf_cls = nets.d_l(fake_low)
            hf_logit, hf_cls = nets.d_h(fake_sub)
            g_low = gan_g_loss(lf_logit, state.saturating)
            g_high = gan_g_loss(hf_logit, state.saturating)
            term = T.add(g_low, g_high)
            if conditional:
                term = T.add(term, class_loss(lf_cls, lab) + class_loss(hf_cls, lab))
            g_low_t += g_low.item()
            g_high_t += g_high.item()
            loss = term if loss is None else T.add(loss, term)
        _optimize(T.mul(loss, 1.0 / n), state.lr_g)
        report["g_low"] = g_low_t / n
        report["g_high"] = g_high_t / n

    # ---- phase 3: slab encoder (only e_h updates) ---------------------------
    if "eh" in phases:
        _only_trainable(state, ("e_h/",))
        loss = None
        rec_h_t = 0.0
        for vol in batch_high:
            term = recon_slab_loss(state, vol, w)
            rec_h_t += term.item()
            loss = term if loss is None else T.add(loss, term)
        _optimize(T.mul(loss, state.weights.lambda1 / n), state.lr_e)
        report["rec_h"] = rec_h_t / n

    # ---- phase 4: global encoder (only e_g updates) --------------------------
    if "eg" in phases:
        _only_trainable(state, ("e_g/",))
        loss = None
        rec_g_t = 0.0
        for vol, low, lab in zip(batch_high, lows, labels):
            term = recon_global_loss(state, vol, low, w, lab)
            rec_g_t += term.item()
            loss = term if loss is None else T.add(loss, term)
        _optimize(T.mul(loss, state.weights.lambda2 / n), state.lr_e)
        report["rec_g"] = rec_g_t / n

    state.step += 1
    for k, v in report.items():
        if not np.isfinite(v):
            raise TrainingDiverged(state.step - 1, report)
    return report


def select_high_np(vol: np.ndarray, w: SliceWindow) -> np.ndarray:
    """High-resolution window of a raw (D, H, W) volume, as (1, d, H, W)."""
    s, l = w.high_start, w.high_length
    if s + l > vol.shape[0]:
        raise T.ShapeError(f"window {w} out of bounds for volume depth {vol.shape[0]}")
    return vol[None, s:s + l]


def format_report(report: dict) -> str:
    """One run-log line; stable key order, full float precision."""
    ordered = {}
    for k in ("step", "r", "d_low", "d_high", "g_low", "g_high",
              "rec_h", "rec_g", "class"):
        if k in report:
            v = report[k]
            ordered[k] = int(v) if k in ("step", "r") else float(v)
    return json.dumps(ordered)


# ---------------------------------------------------------------------------
# checkpointing

_MAGIC = b"SGCK"
_VERSION = 2
_DTYPES = {"<f4": 0, "<f8": 1, "<i8": 2}
_DTYPES_REV = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def _pack_entry(out: list, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPES[arr.dtype.newbyteorder("<").str]
    nb = name.encode()
    out.append(struct.pack("<H", len(nb)))
    out.append(nb)
    out.append(struct.pack("<BB", code, arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def write_store_checkpoint(path, store, header: dict) -> None:
    """Serialize a ParamStore (params, buffers, Adam state) plus a JSON header."""
    header = dict(header)
    header["adam_t"] = {k: v[2] for k, v in store.adam_state.items()}
    hb = json.dumps(header, sort_keys=True).encode()
    body: list[bytes] = [struct.pack("<H", _VERSION), struct.pack("<I", len(hb)), hb]
    for name, p in store.params.items():
        _pack_entry(body, f"param:{name}", p.data)
    for name, b in store.buffers.items():
        _pack_entry(body, f"buffer:{name}", b)
    for name, (m, v, _) in store.adam_state.items():
        _pack_entry(body, f"adam_m:{name}", m)
        _pack_entry(body, f"adam_v:{name}", v)
    blob = b"".join(body)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


def read_store_checkpoint(path, store) -> dict:
    """Restore a ParamStore from disk; returns the header. Verifies magic,
    version, checksum, known names and shapes."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    blob, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise CheckpointError("checksum mismatch: checkpoint corrupt or truncated")
    (version,) = struct.unpack_from("<H", blob, 0)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 2)
    header = json.loads(blob[6:6 + hlen].decode())
    adam_t = header["adam_t"]
    seen = set()
    for name, arr in _read_entries(blob[6 + hlen:]):
        kind, key = name.split(":", 1)
        if kind == "param":
            if key not in store.params:
                raise CheckpointError(f"unknown parameter '{key}' in checkpoint")
            p = store.params[key]
            if p.data.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for '{key}': model {p.data.shape}, file {arr.shape}")
            p.data[...] = arr.astype(p.data.dtype)
        elif kind == "buffer":
            if key not in store.buffers:
                raise CheckpointError(f"unknown buffer '{key}' in checkpoint")
            b = store.buffers[key]
            if b.shape != arr.shape:
                raise CheckpointError(f"buffer shape mismatch for '{key}'")
            b[...] = arr.astype(b.dtype)
        elif kind in ("adam_m", "adam_v"):
            st = store.adam_state.get(key)
            if st is None:
                m = np.zeros_like(store.params[key].data)
                v = np.zeros_like(store.params[key].data)
                T.METER.register_opt(m.nbytes + v.nbytes)
                st = [m, v, int(adam_t[key])]
                store.adam_state[key] = st
            if kind == "adam_m":
                st[0][...] = arr.astype(st[0].dtype)
            else:
                st[1][...] = arr.astype(st[1].dtype)
            st[2] = int(adam_t[key])
        seen.add(name)
    missing = {f"param:{k}" for k in store.params} - seen
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return header


def save_checkpoint(state: TrainState, path) -> None:
    """Bit-exact snapshot: parameters, buffers, Adam moments, rng, step."""
    header = {
        "kind": "hagan",
        "config": asdict(state.cfg),
        "weights": asdict(state.weights),
        "step": state.step,
        "lr": [state.lr_g, state.lr_d, state.lr_e],
        "batch_size": state.batch_size,
        "rng_state": _encode_rng(state.rng),
        "saturating": state.saturating,
        "deterministic_r": state.deterministic_r,
    }
    write_store_checkpoint(path, state.store, header)


def _encode_rng(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st))


def _read_entries(buf: bytes):
    off = 0
    while off < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES_REV[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(buf[off:off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
        yield name, arr


def load_checkpoint(path, state: TrainState | None = None) -> TrainState:
    """Restore a TrainState; verifies magic, version, checksum and shapes.

    With an existing ``state``, its networks must match the stored shapes
    (loading across configurations is an explicit error). Without one, a
    fresh state is built from the stored config.
    """
    if state is None:
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (hlen,) = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[10:10 + hlen].decode())
        cfg = NetConfig(**header["config"]).validate()
        state = init_train_state(cfg, seed=0, weights=LossWeights(**header["weights"]))
        state.lr_g, state.lr_d, state.lr_e = header["lr"]
        state.batch_size = header["batch_size"]
        state.saturating = header["saturating"]
        state.deterministic_r = header["deterministic_r"]
    header = read_store_checkpoint(path, state.store)
    state.step = header["step"]
    state.rng.bit_generator.state = header["rng_state"]
    return state
