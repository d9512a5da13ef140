"""Slab-trained super-resolution (factor 2) with residual and skip paths.

The generator predicts a correction on top of the trilinear upsample of
its input, with an encoder-decoder body whose skip connection feeds
matched-resolution encoder features into the decoder. Inner blocks keep
their depth kernels at 1 so the depth receptive field stays inside a
two-slice margin: training on low-resolution depth slabs and inference
on the whole volume then agree everywhere but the window edges, exactly
like the main generator.

Training pairs are built by degrading clean volumes: additive Gaussian
noise, then a trilinear half-resolution downsample.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .geometry import SliceWindow, sample_r
from .layers import Act, Conv3d, GroupNorm, Interp, Sequential
from .networks import NetConfig, build_d_h
from .optim import ParamStore, adam_step
from .tensor import Tensor, backward, no_grad
from .training import (TrainingDiverged, _encode_rng, gan_d_loss, gan_g_loss,
                       l1_loss, read_store_checkpoint, write_store_checkpoint)

# interior agreement margin between slab and full-volume SR, in input
# (low-resolution) slices
SR_CONSISTENCY_MARGIN = 2


@dataclass(frozen=True)
class SRConfig:
    hr_resolution: int = 64
    sr_factor: int = 2
    noise_sigma: float = 0.05
    subvol_len: int = 8            # depth window length on the LR grid
    lam: float = 1.0               # weight of the l1 reconstruction term
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    width: int = 8                 # channels of the first SR block
    batch_size: int = 2

    @property
    def lr_resolution(self) -> int:
        return self.hr_resolution // self.sr_factor

    def validate(self) -> "SRConfig":
        if self.sr_factor != 2:
            raise ValueError("only factor-2 super-resolution is supported")
        if self.hr_resolution % 2:
            raise ValueError("hr_resolution must be even")
        if self.subvol_len < 2 or self.subvol_len > self.lr_resolution:
            raise ValueError(f"bad subvol_len {self.subvol_len}")
        if self.lr_resolution % 4:
            raise ValueError("lr_resolution must be divisible by 4")
        if self.lam < 0 or self.noise_sigma < 0:
            raise ValueError("lam and noise_sigma must be nonnegative")
        return self


@dataclass
class PairedSample:
    hr: np.ndarray
    lr: np.ndarray


def degrade(hr: np.ndarray, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Noise then trilinear half-resolution downsample, clipped to [-1, 1]."""
    arr = np.asarray(hr, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if any(e % 2 for e in arr.shape[1:]):
        raise T.ShapeError(f"degrade needs even extents, got {arr.shape[1:]}")
    noisy = arr + rng.normal(0.0, noise_sigma, size=arr.shape).astype(np.float32)
    noisy = np.clip(noisy, -1.0, 1.0)
    out = noisy
    for ax in (1, 2, 3):
        m = T.interp_matrix(out.shape[ax], out.shape[ax] // 2,
                            align_corners=False, dtype=np.float32)
        out = T._apply_axis_matrix(out, m, ax)
    out = np.clip(out, -1.0, 1.0)
    return out[0] if squeeze else out


def make_pairs(volumes, noise_sigma: float, rng: np.random.Generator):
    return [PairedSample(hr=np.asarray(v, dtype=np.float32),
                         lr=degrade(v, noise_sigma, rng)) for v in volumes]


def upsample2(vol: np.ndarray) -> np.ndarray:
    """Trilinear x2 upsample of a (D, H, W) or (C, D, H, W) array."""
    arr = np.asarray(vol, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    for ax in (1, 2, 3):
        m = T.interp_matrix(arr.shape[ax], arr.shape[ax] * 2,
                            align_corners=False, dtype=np.float32)
        arr = T._apply_axis_matrix(arr, m, ax)
    return arr[0] if squeeze else arr


class SRGenerator:
    """Residual encoder-decoder: output = trilinear_up(x) + branch(x)."""

    def __init__(self, cfg: SRConfig):
        c = cfg.width
        self.cfg = cfg
        self.head = Sequential("sr_g/head", [
            ("conv", Conv3d(1, c, 3, 1, 1)),
            ("norm", GroupNorm(c, per_depth_slice=True)), ("act", Act("relu")),
        ], in_shape=(1, cfg.subvol_len, cfg.lr_resolution, cfg.lr_resolution))
        self.enc = Sequential("sr_g/enc", [
            ("conv", Conv3d(c, 2 * c, (1, 4, 4), (1, 2, 2), (0, 1, 1))),
            ("norm", GroupNorm(2 * c, per_depth_slice=True)), ("act", Act("relu")),
            ("bott", Conv3d(2 * c, 2 * c, (1, 3, 3), 1, (0, 1, 1))),
            ("bnorm", GroupNorm(2 * c, per_depth_slice=True)), ("bact", Act("relu")),
        ], in_shape=self.head.out_shape())
        self.up_dec = Interp((1, 2, 2), align_corners=False)
        self.dec = Sequential("sr_g/dec", [
            ("conv", Conv3d(3 * c, c, (1, 3, 3), 1, (0, 1, 1))),
            ("norm", GroupNorm(c, per_depth_slice=True)), ("act", Act("relu")),
        ], in_shape=(3 * c,) + self.head.out_shape()[1:])
        self.up_out = Interp(2.0, align_corners=False)
        self.residual_head = Sequential("sr_g/res", [
            ("conv", Conv3d(c, 1, 3, 1, 1, zero_init=True)),
        ], in_shape=(c,) + tuple(2 * e for e in self.head.out_shape()[1:]))
        self.up_res = Interp(2.0, align_corners=False)
        self.forward_count = 0
        self.built = False

    def build(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32):
        for net in (self.head, self.enc, self.dec, self.residual_head):
            net.build(store, rng, dtype)
        self.built = True
        return self

    def n_params(self) -> int:
        return sum(n.n_params() for n in (self.head, self.enc, self.dec, self.residual_head))

    def forward(self, lr: Tensor, training: bool = True) -> Tensor:
        self.forward_count += 1
        h = self.head(lr, training)
        e = self.enc(h, training)
        d = self.dec(T.concat([self.up_dec.forward(e, training), h], axis=0), training)
        res = self.residual_head(self.up_out.forward(d, training), training)
        base = self.up_res.forward(lr, training)
        return T.add(base, res)

    __call__ = forward


@dataclass
class SRState:
    cfg: SRConfig
    gen: SRGenerator
    disc: object
    store: ParamStore
    rng: np.random.Generator
    step: int = 0


def build_sr(cfg: SRConfig, seed: int, dtype=np.float32) -> SRState:
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    gen = SRGenerator(cfg).build(store, rng, dtype)
    dcfg = NetConfig(full_resolution=cfg.hr_resolution, base_channels=cfg.width)
    disc = build_d_h(dcfg, in_channels=2, prefix="sr_d",
                     depth_in=2 * cfg.subvol_len).build(store, rng, dtype)
    return SRState(cfg=cfg, gen=gen, disc=disc, store=store, rng=rng)


_UP2 = Interp(2.0, align_corners=False)


def _disc_input(lr_sub: Tensor, hr_sub: Tensor, training: bool) -> Tensor:
    """Channel-concatenate the upsampled LR window with an HR candidate."""
    up = _UP2.forward(lr_sub, training)
    return T.concat([up, hr_sub], axis=0)


def l1_norm(a: Tensor, b: Tensor) -> Tensor:
    """Unnormalized l1 norm of the difference (sum over voxels).

    The reconstruction term is the plain l1 norm, so against the O(1)
    adversarial term it dominates early and hands over influence only as
    the fit tightens; a per-voxel mean would invert that balance.
    """
    return T.tsum(T.tabs(T.sub(a, b)))


def sr_loss(disc, lr_sub: Tensor, hr_real: Tensor, hr_fake: Tensor, lam: float):
    """Conditional GAN loss pair plus the weighted l1 reconstruction term.

    Returns (d_loss, g_loss); each assumes the caller froze the other side.
    """
    logit_real, _ = disc(_disc_input(lr_sub, hr_real, True))
    logit_fake, _ = disc(_disc_input(lr_sub, hr_fake, True))
    d_loss = gan_d_loss(logit_real, logit_fake)
    g_loss = T.add(gan_g_loss(logit_fake), T.mul(l1_norm(hr_fake, hr_real), lam))
    return d_loss, g_loss


def sr_train_step(state: SRState, pairs: list) -> dict:
    """One alternation (D step then G step) on a batch of PairedSamples."""
    cfg, store, rng = state.cfg, state.store, state.rng
    w = sample_r(cfg.lr_resolution, cfg.subvol_len, rng, resolution_scale=2)
    report = {"step": state.step, "r": w.start}

    def windows(p: PairedSample):
        lr_sub = p.lr[None, w.start:w.start + w.length]
        hr_sub = p.hr[None, w.high_start:w.high_start + w.high_length]
        return lr_sub, hr_sub

    # discriminator step
    store.set_trainable(["sr_g/"], False)
    store.set_trainable(["sr_d/"], True)
    loss = None
    d_t = 0.0
    for p in pairs:
        lr_sub, hr_sub = windows(p)
        with no_grad():
            fake = state.gen(Tensor(lr_sub))
        logit_real, _ = state.disc(_disc_input(Tensor(lr_sub), Tensor(hr_sub), True))
        logit_fake, _ = state.disc(_disc_input(Tensor(lr_sub), fake, True))
        term = gan_d_loss(logit_real, logit_fake)
        d_t += term.item()
        loss = term if loss is None else T.add(loss, term)
    backward(T.mul(loss, 1.0 / len(pairs)))
    adam_step(store, cfg.lr_d)
    store.zero_grads()
    report["d"] = d_t / len(pairs)

    # generator step
    store.set_trainable(["sr_d/"], False)
    store.set_trainable(["sr_g/"], True)
    loss = None
    g_t = l1_t = 0.0
    for p in pairs:
        lr_sub, hr_sub = windows(p)
        lr_t, hr_t = Tensor(lr_sub), Tensor(hr_sub)
        fake = state.gen(lr_t)
        logit_fake, _ = state.disc(_disc_input(lr_t, fake, True))
        adv = gan_g_loss(logit_fake)
        rec = l1_norm(fake, hr_t)
        term = T.add(adv, T.mul(rec, cfg.lam))
        g_t += adv.item()
        l1_t += rec.item() / hr_t.size      # per-voxel value for the log
        loss = term if loss is None else T.add(loss, term)
    backward(T.mul(loss, 1.0 / len(pairs)))
    adam_step(store, cfg.lr_g)
    store.zero_grads()
    report["g_adv"] = g_t / len(pairs)
    report["l1"] = l1_t / len(pairs)

    state.step += 1
    for k, v in report.items():
        if not np.isfinite(v):
            raise TrainingDiverged(state.step - 1, report)
    return report


def sr_train(state: SRState, volumes, steps: int, log=None) -> list:
    """Slab-wise SR training on clean volumes; pairs are degraded once."""
    pair_rng = np.random.default_rng(state.rng.integers(2 ** 63))
    pairs = make_pairs(volumes, state.cfg.noise_sigma, pair_rng)
    reports = []
    for _ in range(steps):
        idx = state.rng.choice(len(pairs), size=min(state.cfg.batch_size, len(pairs)),
                               replace=False)
        rep = sr_train_step(state, [pairs[i] for i in idx])
        reports.append(rep)
        if log is not None:
            log.write(format_sr_report(rep) + "\n")
    return reports


def format_sr_report(report: dict) -> str:
    ordered = {k: (int(report[k]) if k in ("step", "r") else float(report[k]))
               for k in ("step", "r", "d", "g_adv", "l1") if k in report}
    return json.dumps(ordered)


def sr_infer(state: SRState, lr_full: np.ndarray) -> np.ndarray:
    """Whole-volume pass: no windowing, no gradients, one forward call."""
    arr = np.asarray(lr_full, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    before = state.gen.forward_count
    with no_grad():
        out = state.gen(Tensor(arr), training=False).data
    assert state.gen.forward_count == before + 1
    return out


def sr_save(state: SRState, path) -> None:
    header = {"kind": "sr", "config": asdict(state.cfg), "step": state.step,
              "rng_state": _encode_rng(state.rng)}
    write_store_checkpoint(path, state.store, header)


def sr_load(path, state: SRState | None = None) -> SRState:
    if state is None:
        import struct as _s
        with open(path, "rb") as f:
            raw = f.read()
        (hlen,) = _s.unpack_from("<I", raw, 6)
        header = json.loads(raw[10:10 + hlen].decode())
        state = build_sr(SRConfig(**header["config"]), seed=0)
    header = read_store_checkpoint(path, state.store)
    state.step = header["step"]
    state.rng.bit_generator.state = header["rng_state"]
    return state
