"""The CLOVEN network: view encoders, deep fusion, projection and clustering heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Rng, Tensor
from .nn import MLP, BatchNorm, Dropout, Linear, Module

FUSION_KINDS = ("vanilla", "residual")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``encoder_widths[v]`` lists every layer width of view ``v``'s encoder,
    input first. Encoders must end at ``common_dim`` because the projection and
    clustering heads are shared between ``Z`` and every ``H``.
    """

    encoder_widths: list[list[int]]
    common_dim: int
    clusters: int
    fusion_kind: str = "residual"
    fusion_layers: int = 2
    dropout_p: float = 0.1
    projection_widths: Optional[list[int]] = None
    clustering_hidden_width: int = 128
    # M_scale / M_reduce placement: False widens inside ScaleBlock and narrows
    # inside LatentBlock; True swaps the two
    swap_block_widths: bool = False
    mapping_activation: bool = False

    def __post_init__(self):
        if self.projection_widths is None:
            self.projection_widths = [self.common_dim] * 3

    @property
    def views(self) -> int:
        return len(self.encoder_widths)

    def validate(self) -> list[str]:
        errors = []
        if self.views < 2:
            errors.append(f"need at least 2 views, got {self.views}")
        if self.fusion_kind not in FUSION_KINDS:
            errors.append(f"fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if self.fusion_layers < 1:
            errors.append(f"fusion_layers must be >= 1, got {self.fusion_layers}")
        if self.clusters < 2:
            errors.append(f"clusters must be >= 2, got {self.clusters}")
        if not 0.0 <= self.dropout_p < 1.0:
            errors.append(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.common_dim < 2:
            errors.append(f"common_dim must be >= 2, got {self.common_dim}")
        for v, widths in enumerate(self.encoder_widths):
            if len(widths) < 2 or any(w < 1 for w in widths):
                errors.append(f"encoder {v}: widths must have >= 2 positive entries, got {widths}")
            elif widths[-1] != self.common_dim:
                errors.append(f"encoder {v}: output width {widths[-1]} must equal common_dim {self.common_dim}")
        if len(self.projection_widths) != 3 or any(w < 1 for w in self.projection_widths):
            errors.append(f"projection_widths must be 3 positive widths, got {self.projection_widths}")
        if self.clustering_hidden_width < 1:
            errors.append("clustering_hidden_width must be >= 1")
        return errors

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ----------------------------------------------------------------------------
# fusion


class MapConcat(Module):
    """Concatenate views column-wise and apply one dense layer."""

    def __init__(self, in_dims: Sequence[int], out_dim: int, rng: Rng, activation: bool = False):
        self.in_dims = list(in_dims)
        self.activation = activation
        self.linear = Linear(int(np.sum(self.in_dims)), out_dim, rng)

    def forward(self, hs: Sequence[Tensor]) -> Tensor:
        _check_views(hs, self.in_dims)
        z = self.linear(ad.concat(list(hs), axis=1))
        return ad.relu(z) if self.activation else z


def _check_views(hs: Sequence[Tensor], dims: Sequence[int]) -> None:
    if len(hs) != len(dims):
        raise ContractError(f"expected {len(dims)} views, got {len(hs)}")
    rows = {h.shape[0] for h in hs}
    if len(rows) != 1:
        raise ContractError(f"views disagree on row count: {[h.shape for h in hs]}")
    for v, (h, d) in enumerate(zip(hs, dims)):
        if h.shape[1] != d:
            raise ContractError(f"view {v}: expected {d} columns, got {h.shape[1]}")


class ResidualBlock(Module):
    """``RB(z) = M(norm(z)) + z`` with ``M`` a two-layer ReLU MLP."""

    def __init__(self, dim: int, rng: Rng):
        self.dim = dim
        self.norm = BatchNorm(dim)
        self.mlp = MLP([dim, dim, dim], rng)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ContractError(f"ResidualBlock: expected {self.dim} columns, got shape {z.shape}")
        return self.mlp(self.norm(z)) + z


class _WidthBlock(Module):
    def __init__(self, dim: int, inner: int, p: float, rng: Rng):
        if inner < 1:
            raise ContractError(f"block inner width must be >= 1 (dim={dim})")
        self.dim = dim
        self.inner = inner
        self.rb = ResidualBlock(dim, rng)
        self.dropout = Dropout(p)
        self.mlp = MLP([dim, inner, dim], rng)

    def forward(self, z: Tensor, rng: Optional[Rng] = None) -> Tensor:
        return self.mlp(self.dropout(self.rb(z), rng)) + z


class ScaleBlock(_WidthBlock):
    """Residual block, dropout, then a detour through ``2*dim`` units."""

    def __init__(self, dim: int, p: float, rng: Rng, inner: Optional[int] = None):
        super().__init__(dim, 2 * dim if inner is None else inner, p, rng)


class LatentBlock(_WidthBlock):
    """Residual block, dropout, then a bottleneck of ``dim // 2`` units."""

    def __init__(self, dim: int, p: float, rng: Rng, inner: Optional[int] = None):
        if dim < 2:
            raise ContractError(f"LatentBlock: dim must be >= 2, got {dim}")
        super().__init__(dim, dim // 2 if inner is None else inner, p, rng)


class ResidualFusion(Module):
    """Mapping layer followed by ``layers`` repetitions of (ScaleBlock, LatentBlock)."""

    def __init__(self, in_dims, dim: int, layers: int, p: float, rng: Rng,
                 swap_widths: bool = False, mapping_activation: bool = False):
        self.mapping = MapConcat(in_dims, dim, rng, mapping_activation)
        wide, narrow = 2 * dim, dim // 2
        if swap_widths:
            wide, narrow = narrow, wide
        self.blocks: list[_WidthBlock] = []
        for _ in range(layers):
            self.blocks.append(ScaleBlock(dim, p, rng, inner=wide))
            self.blocks.append(LatentBlock(dim, p, rng, inner=narrow))

    def forward(self, hs: Sequence[Tensor], rng: Optional[Rng] = None) -> Tensor:
        z = self.mapping(hs)
        for i, block in enumerate(self.blocks):
            z = block(z, None if rng is None else rng.fork(i))
        return z

    def zero_inner_weights(self) -> None:
        """Zero every dense layer except the mapping layer (leaves only skip paths)."""
        for block in self.blocks:
            for m in block.modules():
                if isinstance(m, Linear):
                    m.zero_()


class VanillaFusion(Module):
    """``layers`` dense+ReLU layers on the concatenated views, then a linear layer."""

    def __init__(self, in_dims, dim: int, layers: int, rng: Rng):
        self.in_dims = list(in_dims)
        self.mlp = MLP([int(np.sum(self.in_dims))] + [dim] * layers + [dim], rng)

    def forward(self, hs: Sequence[Tensor], rng: Optional[Rng] = None) -> Tensor:
        _check_views(hs, self.in_dims)
        return self.mlp(ad.concat(list(hs), axis=1))


# ----------------------------------------------------------------------------
# heads


class ClusteringHead(Module):
    """Dense -> ReLU (the hidden features) -> dense -> softmax."""

    def __init__(self, in_dim: int, hidden: int, clusters: int, rng: Rng):
        self.in_dim = in_dim
        self.hidden_layer = Linear(in_dim, hidden, rng)
        self.output_layer = Linear(hidden, clusters, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ContractError(f"ClusteringHead: expected {self.in_dim} columns, got shape {x.shape}")
        hidden = ad.relu(self.hidden_layer(x))
        return ad.softmax(self.output_layer(hidden)), hidden


@dataclass
class ForwardOutput:
    H: list[Tensor]
    Z: Tensor
    Z_proj: Tensor
    H_proj: list[Tensor]
    A_Z: Tensor
    hidden_Z: Tensor
    A_H: list[Tensor]
    hidden_H: list[Tensor] = field(default_factory=list)


class CloVenModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        errors = config.validate()
        if errors:
            raise ContractError("invalid ModelConfig: " + "; ".join(errors))
        self.config = config
        rng = Rng(seed, 0x1A17)
        d = config.common_dim
        self.encoders = [MLP(w, rng.fork(v)) for v, w in enumerate(config.encoder_widths)]
        out_dims = [w[-1] for w in config.encoder_widths]
        frng = rng.fork(1000)
        if config.fusion_kind == "residual":
            self.fusion = ResidualFusion(out_dims, d, config.fusion_layers, config.dropout_p, frng,
                                         config.swap_block_widths, config.mapping_activation)
        else:
            self.fusion = VanillaFusion(out_dims, d, config.fusion_layers, frng)
        self.projection = MLP([d] + list(config.projection_widths), rng.fork(2000))
        self.cluster_head = ClusteringHead(d, config.clustering_hidden_width, config.clusters, rng.fork(3000))

    def encode_view(self, i: int, x: Tensor) -> Tensor:
        if not 0 <= i < len(self.encoders):
            raise ContractError(f"view index {i} out of range for {len(self.encoders)} views")
        widths = self.config.encoder_widths[i]
        if x.ndim != 2 or x.shape[1] != widths[0]:
            raise ContractError(f"view {i}: expected {widths[0]} input columns, got shape {x.shape}")
        return self.encoders[i](x)

    def fuse(self, hs: Sequence[Tensor], rng: Optional[Rng] = None) -> Tensor:
        return self.fusion(hs, rng)

    def project(self, x: Tensor) -> Tensor:
        return self.projection(x)

    def cluster_assign(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.cluster_head(x)

    def forward(self, views: Sequence, rng: Optional[Rng] = None) -> ForwardOutput:
        if len(views) != self.config.views:
            raise ContractError(f"expected {self.config.views} views, got {len(views)}")
        hs = [self.encode_view(i, x if isinstance(x, Tensor) else Tensor(x)) for i, x in enumerate(views)]
        z = self.fuse(hs, rng)
        a_z, hid_z = self.cluster_assign(z)
        a_h, hid_h = zip(*(self.cluster_assign(h) for h in hs))
        return ForwardOutput(
            H=hs,
            Z=z,
            Z_proj=self.project(z),
            H_proj=[self.project(h) for h in hs],
            A_Z=a_z,
            hidden_Z=hid_z,
            A_H=list(a_h),
            hidden_H=list(hid_h),
        )

    def embed(self, views: Sequence[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Eval-mode ``Z`` and per-view ``H`` as plain arrays (restores the previous mode)."""
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                hs = [self.encode_view(i, Tensor(x)) for i, x in enumerate(views)]
                z = self.fuse(hs)
                return z.data, [h.data for h in hs]
        finally:
            self.train(was_training)

    def assign(self, views: Sequence[np.ndarray]) -> np.ndarray:
        """Eval-mode soft assignment ``g(Z)``."""
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                hs = [self.encode_view(i, Tensor(x)) for i, x in enumerate(views)]
                return self.cluster_assign(self.fuse(hs))[0].data
        finally:
            self.train(was_training)


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"CLOVENCK"
VERSION = 1


def state_arrays(model: Module) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.named_parameters()}
    for name, buf in model.named_buffers():
        out[name] = buf
    return out


def save_checkpoint(path, model: CloVenModel, meta: Optional[dict] = None,
                    extra: Optional[dict[str, np.ndarray]] = None) -> None:
    """Write model config, parameters, buffers and optional extra arrays.

    Layout: magic, u32 version, u64 header length, canonical-JSON header
    (``config`` and ``meta``), u32 entry count, then per entry a u16 name length,
    UTF-8 name, u8 rank, u64 extents and little-endian float64 data.
    """
    header = json.dumps({"config": asdict(model.config), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    arrays = dict(state_arrays(model))
    arrays.update(extra or {})
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated entry {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    return header, arrays


def load_checkpoint(path) -> tuple[CloVenModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model and return ``(model, meta, extra_arrays)``."""
    header, arrays = read_checkpoint(path)
    model = CloVenModel(ModelConfig.from_dict(header["config"]))
    load_state(model, arrays)
    names = set(state_arrays(model))
    extra = {k: v for k, v in arrays.items() if k not in names}
    return model, header["meta"], extra


def load_state(model: Module, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"parameter {name!r}: shape {arrays[name].shape} != {p.data.shape}")
        p.data[...] = arrays[name]
    for name, buf in model.named_buffers():
        if name in arrays:
            buf[...] = arrays[name]
