"""Residual CNN with an environment-independent trunk and per-environment heads.

The trunk runs the fingerprint through residual blocks (each: conv-bn-relu,
conv-bn-relu with a subcarrier-downsampling stride, plus an unactivated 1x1
projection skip), flattens, and applies the first 128-unit dense layer. Each
head is two hidden dense layers plus the 2-unit position output. Heads only
ever see their own environment's data; the trunk is shared.

Checkpoints are a versioned binary container: magic, version, a JSON header
(architecture, input shape, head ids), then named tensors as little-endian
64-bit floats.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    OptimizerState,
    Tensor,
    add,
    batchnorm,
    conv2d,
    dense,
    flatten,
    he_uniform,
    relu,
)
from .errors import CheckpointError, ConfigError, ShapeError

_STREAM_TRUNK_INIT = 5
_STREAM_HEAD_INIT = 6

_MAGIC = b"MLCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    num_residual_blocks: int = 2
    filters: int = 32
    kernel: tuple = (4, 4)
    block_stride: tuple = (1, 4)
    fc_width: int = 128
    trunk_fc_layers: int = 1
    head_fc_layers: int = 2
    output_dim: int = 2

    def __post_init__(self):
        for name in ("num_residual_blocks", "filters", "fc_width", "trunk_fc_layers", "head_fc_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.output_dim != 2:
            raise ConfigError("positions are 2-D; output_dim must be 2")
        object.__setattr__(self, "kernel", tuple(self.kernel))
        object.__setattr__(self, "block_stride", tuple(self.block_stride))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def trunk_feature_size(arch: ArchConfig, input_shape) -> int:
    """Flattened size after the residual blocks ('same' padding throughout)."""
    h, w, _ = input_shape
    sh, sw = arch.block_stride
    for _ in range(arch.num_residual_blocks):
        h = _ceil_div(h, sh)
        w = _ceil_div(w, sw)
    return h * w * arch.filters


@dataclass
class ModelParams:
    arch: ArchConfig
    input_shape: tuple  # (N_A, N_C, 3)
    trunk: dict  # name -> Tensor
    trunk_bn: dict  # name -> BatchNormState
    heads: dict  # env_id -> {name -> Tensor}

    def named_parameters(self, include_trunk: bool = True, head_ids=None) -> dict:
        """Flat name->Tensor map: 'trunk.*' and 'heads.<env>.*'."""
        out = {}
        if include_trunk:
            for n, t in self.trunk.items():
                out[f"trunk.{n}"] = t
        ids = sorted(self.heads) if head_ids is None else head_ids
        for env in ids:
            for n, t in self.heads[env].items():
                out[f"heads.{env}.{n}"] = t
        return out

    def trunk_weight_count(self) -> int:
        return sum(t.data.size for t in self.trunk.values())

    def head_weight_count(self, env_id=None) -> int:
        env_id = env_id if env_id is not None else next(iter(sorted(self.heads)))
        return sum(t.data.size for t in self.heads[env_id].values())


def _init_trunk(arch: ArchConfig, input_shape, rng) -> tuple:
    kh, kw = arch.kernel
    params = {}
    bn = {}
    cin = input_shape[2]
    for b in range(arch.num_residual_blocks):
        f = arch.filters
        params[f"block{b}.conv1.w"] = Tensor(he_uniform((kh, kw, cin, f), kh * kw * cin, rng), True)
        params[f"block{b}.conv1.b"] = Tensor(np.zeros(f), True)
        params[f"block{b}.bn1.gamma"] = Tensor(np.ones(f), True)
        params[f"block{b}.bn1.beta"] = Tensor(np.zeros(f), True)
        params[f"block{b}.conv2.w"] = Tensor(he_uniform((kh, kw, f, f), kh * kw * f, rng), True)
        params[f"block{b}.conv2.b"] = Tensor(np.zeros(f), True)
        params[f"block{b}.bn2.gamma"] = Tensor(np.ones(f), True)
        params[f"block{b}.bn2.beta"] = Tensor(np.zeros(f), True)
        params[f"block{b}.skip.w"] = Tensor(he_uniform((1, 1, cin, f), cin, rng), True)
        params[f"block{b}.skip.b"] = Tensor(np.zeros(f), True)
        bn[f"block{b}.bn1"] = BatchNormState.create(f)
        bn[f"block{b}.bn2"] = BatchNormState.create(f)
        cin = f
    feat = trunk_feature_size(arch, input_shape)
    width_in = feat
    for i in range(arch.trunk_fc_layers):
        params[f"fc{i}.w"] = Tensor(he_uniform((width_in, arch.fc_width), width_in, rng), True)
        params[f"fc{i}.b"] = Tensor(np.zeros(arch.fc_width), True)
        width_in = arch.fc_width
    return params, bn


def _init_head(arch: ArchConfig, rng) -> dict:
    params = {}
    width = arch.fc_width
    for i in range(arch.head_fc_layers):
        params[f"h{i}.w"] = Tensor(he_uniform((width, arch.fc_width), width, rng), True)
        params[f"h{i}.b"] = Tensor(np.zeros(arch.fc_width), True)
        width = arch.fc_width
    params["out.w"] = Tensor(he_uniform((width, arch.output_dim), width, rng), True)
    params["out.b"] = Tensor(np.zeros(arch.output_dim), True)
    return params


def init_model(arch: ArchConfig, input_shape, head_ids, rng_seed: int) -> ModelParams:
    """Seeded deterministic initialization; each head gets its own stream."""
    if isinstance(head_ids, int):
        if head_ids < 1:
            raise ConfigError("need at least one head")
        head_ids = [str(i) for i in range(head_ids)]
    head_ids = [str(h) for h in head_ids]
    if len(set(head_ids)) != len(head_ids):
        raise ConfigError(f"duplicate head ids: {head_ids}")
    input_shape = tuple(int(d) for d in input_shape)
    trunk_rng = np.random.default_rng([int(rng_seed), _STREAM_TRUNK_INIT])
    trunk, bn = _init_trunk(arch, input_shape, trunk_rng)
    heads = {}
    for i, env in enumerate(sorted(head_ids)):
        head_rng = np.random.default_rng([int(rng_seed), _STREAM_HEAD_INIT, i])
        heads[env] = _init_head(arch, head_rng)
    return ModelParams(arch=arch, input_shape=input_shape, trunk=trunk, trunk_bn=bn, heads=heads)


def fresh_head(arch: ArchConfig, rng_seed: int, index: int = 0) -> dict:
    """A head initialized exactly like head `index` of init_model(rng_seed)."""
    rng = np.random.default_rng([int(rng_seed), _STREAM_HEAD_INIT, index])
    return _init_head(arch, rng)


def forward_trunk(model: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Residual blocks, flatten, first dense layer(s); ReLU feature output."""
    if x.data.ndim != 4 or tuple(x.data.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"trunk expects (B,{','.join(map(str, model.input_shape))}), got {x.data.shape}"
        )
    arch = model.arch
    p = model.trunk
    out = x
    for b in range(arch.num_residual_blocks):
        main = conv2d(out, p[f"block{b}.conv1.w"], p[f"block{b}.conv1.b"], stride=(1, 1))
        main = relu(
            batchnorm(
                main,
                p[f"block{b}.bn1.gamma"],
                p[f"block{b}.bn1.beta"],
                model.trunk_bn[f"block{b}.bn1"],
                mode,
            )
        )
        main = conv2d(main, p[f"block{b}.conv2.w"], p[f"block{b}.conv2.b"], stride=arch.block_stride)
        main = relu(
            batchnorm(
                main,
                p[f"block{b}.bn2.gamma"],
                p[f"block{b}.bn2.beta"],
                model.trunk_bn[f"block{b}.bn2"],
                mode,
            )
        )
        skip = conv2d(out, p[f"block{b}.skip.w"], p[f"block{b}.skip.b"], stride=arch.block_stride)
        out = add(main, skip)
    out = flatten(out)
    for i in range(arch.trunk_fc_layers):
        out = relu(dense(out, p[f"fc{i}.w"], p[f"fc{i}.b"]))
    return out


def forward_head(head: dict, z: Tensor) -> Tensor:
    """Two hidden dense+ReLU layers then the unactivated 2-D position output."""
    out = z
    i = 0
    while f"h{i}.w" in head:
        out = relu(dense(out, head[f"h{i}.w"], head[f"h{i}.b"]))
        i += 1
    return dense(out, head["out.w"], head["out.b"])


def forward_model(model: ModelParams, env_id: str, x: Tensor, mode: str) -> Tensor:
    return forward_head(model.heads[str(env_id)], forward_trunk(model, x, mode))


def clone_trunk(model: ModelParams) -> tuple:
    """Deep copies of the trunk tensors and batchnorm running statistics."""
    trunk = {n: Tensor(t.data.copy(), True) for n, t in model.trunk.items()}
    bn = {n: s.copy() for n, s in model.trunk_bn.items()}
    return trunk, bn


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(buf):
    raw = buf.read(4)
    if not raw:
        return None
    (nlen,) = struct.unpack("<I", raw)
    name = buf.read(nlen).decode()
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.copy()


def _collect_tensors(model: ModelParams, include_heads: bool, optimizer) -> dict:
    out = {}
    for n, t in model.trunk.items():
        out[f"trunk.{n}"] = t.data
    for n, s in model.trunk_bn.items():
        out[f"trunk_bn.{n}.running_mean"] = s.running_mean
        out[f"trunk_bn.{n}.running_var"] = s.running_var
    if include_heads:
        for env in sorted(model.heads):
            for n, t in model.heads[env].items():
                out[f"heads.{env}.{n}"] = t.data
    if optimizer is not None:
        for n, a in optimizer.m.items():
            out[f"opt.m.{n}"] = a
        for n, a in optimizer.v.items():
            out[f"opt.v.{n}"] = a
    return out


def save_checkpoint(model: ModelParams, path, optimizer: OptimizerState | None = None, include_heads: bool = True) -> None:
    header = {
        "arch": asdict(model.arch),
        "input_shape": list(model.input_shape),
        "head_ids": sorted(model.heads) if include_heads else [],
        "optimizer": None
        if optimizer is None
        else {
            "kind": optimizer.kind,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
        },
    }
    hb = json.dumps(header).encode()
    tensors = _collect_tensors(model, include_heads, optimizer)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])


def load_checkpoint(path, expect_arch: ArchConfig | None = None, expect_input_shape=None):
    """Read a checkpoint; returns (ModelParams, OptimizerState | None)."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(4) != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode())
    arch = ArchConfig(**{**header["arch"], "kernel": tuple(header["arch"]["kernel"]), "block_stride": tuple(header["arch"]["block_stride"])})
    input_shape = tuple(header["input_shape"])
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"{path}: checkpoint architecture {arch} != expected {expect_arch}")
    if expect_input_shape is not None and input_shape != tuple(expect_input_shape):
        raise CheckpointError(
            f"{path}: checkpoint input shape {input_shape} != expected {tuple(expect_input_shape)}"
        )

    tensors = {}
    while True:
        rec = _read_tensor(buf)
        if rec is None:
            break
        tensors[rec[0]] = rec[1]

    trunk = {}
    bn = {}
    heads = {h: {} for h in header["head_ids"]}
    for name, arr in tensors.items():
        if name.startswith("trunk_bn."):
            rest = name[len("trunk_bn.") :]
            layer, stat = rest.rsplit(".", 1)
            st = bn.setdefault(layer, BatchNormState(np.zeros(arr.shape), np.ones(arr.shape)))
            setattr(st, stat, arr)
        elif name.startswith("trunk."):
            trunk[name[len("trunk.") :]] = Tensor(arr, True)
        elif name.startswith("heads."):
            _, env, pname = name.split(".", 2)
            heads[env][pname] = Tensor(arr, True)
        elif name.startswith("opt."):
            continue
        else:
            raise CheckpointError(f"{path}: unknown tensor record {name!r}")

    model = ModelParams(arch=arch, input_shape=input_shape, trunk=trunk, trunk_bn=bn, heads=heads)
    _validate_model_shapes(model)

    opt = None
    if header["optimizer"] is not None:
        h = header["optimizer"]
        opt = OptimizerState(
            kind=h["kind"], lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], step_count=h["step_count"]
        )
        for name, arr in tensors.items():
            if name.startswith("opt.m."):
                opt.m[name[len("opt.m.") :]] = arr
            elif name.startswith("opt.v."):
                opt.v[name[len("opt.v.") :]] = arr
    return model, opt


def _validate_model_shapes(model: ModelParams) -> None:
    reference = init_model(model.arch, model.input_shape, ["_probe"], rng_seed=0)
    want = {n: t.data.shape for n, t in reference.trunk.items()}
    got = {n: t.data.shape for n, t in model.trunk.items()}
    if want != got:
        raise CheckpointError(f"trunk tensor shapes {got} do not match architecture (want {want})")
    head_want = {n: t.data.shape for n, t in reference.heads["_probe"].items()}
    for env, head in model.heads.items():
        got = {n: t.data.shape for n, t in head.items()}
        if head_want != got:
            raise CheckpointError(f"head {env!r} tensor shapes do not match architecture")
