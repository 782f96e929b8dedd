"""Velocity MLP shared by teacher, generator and fake model; frozen-backbone discriminator."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dmdlab import ndgrad as nd
from dmdlab.errors import ContractViolation
from dmdlab.ndgrad import LayoutEntry, ParamVector, Tensor


@dataclass(frozen=True)
class NetConfig:
    width: int = 128
    depth: int = 4
    time_dim: int = 32
    cond_dim: int = 16
    n_cond: int = 8
    data_dim: int = 2
    max_freq: float = 50.0


def time_embedding(t, n: int, dim: int, max_freq: float) -> np.ndarray:
    """Sinusoidal features of t (scalar or per-row), frequencies geometric in [1, max_freq]."""
    t = np.asarray(t, dtype=np.float64)
    col = np.broadcast_to(t.reshape(-1, 1) if t.ndim else t, (n, 1))
    freqs = np.geomspace(1.0, max_freq, dim // 2)
    ang = col * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def one_hot(cond, n: int, n_cond: int) -> np.ndarray:
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    if cond.min(initial=0) < 0 or cond.max(initial=0) >= n_cond:
        raise ContractViolation(f"condition label outside [0, {n_cond})")
    out = np.zeros((n, n_cond))
    out[np.arange(n), cond] = 1.0
    return out


def _check_unit_interval(t):
    arr = np.asarray(t)
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ContractViolation("time must lie in [0, 1]")


class VelocityNet:
    """v(x, t, c): MLP over [x, sinusoidal(t), embedding(c)] with SiLU hidden layers."""

    def __init__(self, config: NetConfig, params: ParamVector):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "VelocityNet":
        w, d = config.width, config.data_dim
        arrays = {
            "cond_table": rng.standard_normal((config.n_cond, config.cond_dim)),
            "in_x": rng.standard_normal((d, w)) / np.sqrt(d + config.time_dim + config.cond_dim),
            "in_t": rng.standard_normal((config.time_dim, w)) / np.sqrt(d + config.time_dim + config.cond_dim),
            "in_c": rng.standard_normal((config.cond_dim, w)) / np.sqrt(d + config.time_dim + config.cond_dim),
            "in_b": np.zeros(w),
        }
        for i in range(1, config.depth):
            arrays[f"h{i}_w"] = rng.standard_normal((w, w)) / np.sqrt(w)
            arrays[f"h{i}_b"] = np.zeros(w)
        arrays["out_w"] = rng.standard_normal((w, d)) * (0.1 / np.sqrt(w))
        arrays["out_b"] = np.zeros(d)
        return cls(config, ParamVector.from_arrays(arrays))

    def with_params(self, params: ParamVector) -> "VelocityNet":
        if params.layout != self.params.layout:
            raise ContractViolation("parameter layout does not match this network")
        return VelocityNet(self.config, params)

    def apply(self, p: dict, x, t, cond) -> Tensor:
        """Differentiable forward; ``p`` maps names to Tensors or arrays."""
        _check_unit_interval(t)
        cfg = self.config
        x = nd.as_tensor(x)
        n = x.shape[0]
        temb = time_embedding(t, n, cfg.time_dim, cfg.max_freq)
        cemb = nd.matmul(one_hot(cond, n, cfg.n_cond), p["cond_table"])
        h = nd.add(nd.affine(x, p["in_x"], p["in_b"]), nd.add(nd.matmul(temb, p["in_t"]), nd.matmul(cemb, p["in_c"])))
        h = nd.silu(h)
        for i in range(1, cfg.depth):
            h = nd.silu(nd.affine(h, p[f"h{i}_w"], p[f"h{i}_b"]))
        return nd.affine(h, p["out_w"], p["out_b"])

    def velocity(self, x: np.ndarray, t, cond) -> np.ndarray:
        return self.apply(self.params.unflatten(), x, t, cond).value


def velocity_forward(net: VelocityNet, x: np.ndarray, t, cond) -> np.ndarray:
    return net.velocity(x, t, cond)


def generator_step(G, x: np.ndarray, tau_from, tau_to, cond) -> np.ndarray:
    """One Euler displacement of the field from tau_from down to tau_to."""
    if np.any(np.asarray(tau_to) > np.asarray(tau_from)):
        raise ContractViolation("generator steps must move toward t = 0")
    if np.all(np.asarray(tau_to) == np.asarray(tau_from)):
        return np.array(x, dtype=np.float64, copy=True)
    delta = np.asarray(tau_to, dtype=np.float64) - np.asarray(tau_from, dtype=np.float64)
    if delta.ndim:
        delta = delta.reshape(-1, 1)
    return x + delta * G.velocity(x, tau_from, cond)


# --------------------------------------------------------------------------
# discriminator


@dataclass(frozen=True)
class DiscConfig:
    backbone_width: int = 256
    head_width: int = 64
    n_cond: int = 8
    data_dim: int = 2
    input_scale: float = 2.0


class Discriminator:
    """h(f(x), c, r): trainable head over a random frozen feature network f.

    logit = sum_j z_j * (c_j * r_j + u_j) + b, with z the head features of x,
    c the condition embedding and r a projection of f(x_ref).
    """

    def __init__(self, config: DiscConfig, backbone_params: ParamVector, head_params: ParamVector):
        self.config = config
        self.backbone_params = backbone_params
        self.head_params = head_params

    @classmethod
    def init(cls, config: DiscConfig, rng: np.random.Generator) -> "Discriminator":
        bw, hw = config.backbone_width, config.head_width
        backbone = ParamVector.from_arrays(
            {
                "f1_w": rng.standard_normal((config.data_dim, bw)) * config.input_scale,
                "f1_b": rng.uniform(-np.pi, np.pi, bw),
                "f2_w": rng.standard_normal((bw, bw)) / np.sqrt(bw),
                "f2_b": np.zeros(bw),
            }
        )
        head = ParamVector.from_arrays(
            {
                "z1_w": rng.standard_normal((bw, hw)) / np.sqrt(bw),
                "z1_b": np.zeros(hw),
                "z2_w": rng.standard_normal((hw, hw)) / np.sqrt(hw),
                "z2_b": np.zeros(hw),
                "cond_table": rng.standard_normal((config.n_cond, hw)) * 0.1,
                "ref_w": rng.standard_normal((bw, hw)) / np.sqrt(bw),
                "u": rng.standard_normal(hw) / np.sqrt(hw),
                "bias": np.zeros(1),
            }
        )
        return cls(config, backbone, head)

    def with_head(self, head: ParamVector) -> "Discriminator":
        return Discriminator(self.config, self.backbone_params, head)

    @staticmethod
    def features(bp: dict, x) -> Tensor:
        bp = {k: nd.stop_gradient(v) for k, v in bp.items()}
        return nd.tanh(nd.affine(nd.tanh(nd.affine(x, bp["f1_w"], bp["f1_b"])), bp["f2_w"], bp["f2_b"]))

    def apply(self, bp: dict, hp: dict, x, cond, x_ref) -> Tensor:
        """Per-sample logits as an (n, 1) Tensor."""
        r_feat = self.features(bp, nd.stop_gradient(x_ref)).value
        return self.apply_features(hp, self.features(bp, x), cond, r_feat)

    def apply_features(self, hp: dict, fx: Tensor, cond, r_feat: np.ndarray) -> Tensor:
        """Head over precomputed backbone features of x and of the reference."""
        n = fx.shape[0]
        z = nd.silu(nd.affine(fx, hp["z1_w"], hp["z1_b"]))
        z = nd.silu(nd.affine(z, hp["z2_w"], hp["z2_b"]))
        c = nd.matmul(one_hot(cond, n, self.config.n_cond), hp["cond_table"])
        r = nd.matmul(r_feat, hp["ref_w"])
        fused = nd.add(nd.mul(c, r), hp["u"])
        return nd.add(nd.sum(nd.mul(z, fused), axis=1), hp["bias"])

    def backbone(self, x: np.ndarray) -> np.ndarray:
        return self.features(self.backbone_params.unflatten(), x).value

    def logits(self, x, cond, x_ref) -> np.ndarray:
        return self.apply(self.backbone_params.unflatten(), self.head_params.unflatten(), x, cond, x_ref).value[:, 0]


def discriminate(D: Discriminator, x: np.ndarray, cond, x_ref: np.ndarray) -> np.ndarray:
    return D.logits(x, cond, x_ref)


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"DMDLAB-CKPT\x01"


def save_checkpoint(path, params: ParamVector, meta: dict | None = None) -> None:
    header = {
        "layout": [[e.name, list(e.shape), e.offset] for e in params.layout],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamVector, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ContractViolation(f"{path} is not a checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    header = json.loads(blob[pos : pos + n])
    flat = np.frombuffer(blob[pos + n :], dtype="<f8").astype(np.float64)
    layout = tuple(LayoutEntry(name, tuple(shape), off) for name, shape, off in header["layout"])
    return ParamVector(flat, layout), header["meta"]


def save_net(path, net: VelocityNet, **meta) -> None:
    save_checkpoint(path, net.params, {"net": asdict(net.config), **meta})


def load_net(path) -> VelocityNet:
    params, meta = load_checkpoint(path)
    return VelocityNet(NetConfig(**meta["net"]), params)
