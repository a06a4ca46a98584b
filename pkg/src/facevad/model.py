"""Tiny VGG/ResNet regression backbones with global or bilinear heads."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bilinear import BilinearHeadConfig, bilinear_head
from .tensor import ShapeError, Tensor

MAGIC = b"DEMO"
FORMAT_VERSION = 1
BACKBONES = ("vgg_tiny", "resnet_tiny")
HEADS = ("global", "bilinear")
ATTACH = ("auto", "output", "pre_last_conv")
DEFAULT_WIDTHS = {"vgg_tiny": (16, 32, 64, 64), "resnet_tiny": (16, 32, 64)}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "vgg_tiny"
    widths: tuple[int, ...] | None = None
    depths: tuple[int, ...] | None = None
    head: str = "global"
    bilinear: BilinearHeadConfig = field(default_factory=BilinearHeadConfig)
    head_attach: str = "auto"
    output_dims: int = 2
    input_size: int = 48
    input_channels: int = 1
    output_bias_init: float = 5.0
    seed: int = 0

    def __post_init__(self):
        widths = self.widths if self.widths is not None else DEFAULT_WIDTHS.get(self.backbone, ())
        depths = self.depths if self.depths is not None else (2,) * len(widths)
        object.__setattr__(self, "widths", tuple(int(w) for w in widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in depths))
        if isinstance(self.bilinear, dict):
            object.__setattr__(self, "bilinear", BilinearHeadConfig(**self.bilinear))
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head_attach not in ATTACH:
            raise ConfigError(f"head_attach must be one of {ATTACH}, got {self.head_attach!r}")
        if self.output_dims not in (2, 3):
            raise ConfigError("output_dims must be 2 (VA) or 3 (VAD)")
        if self.input_channels not in (1, 3):
            raise ConfigError("input_channels must be 1 or 3")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be non-empty and positive")
        if self.backbone == "vgg_tiny" and (len(self.depths) != len(self.widths) or any(d < 1 for d in self.depths)):
            raise ConfigError("vgg_tiny needs one positive depth per stage width")

    @property
    def attach(self) -> str:
        if self.head_attach != "auto":
            return self.head_attach
        return "pre_last_conv" if self.backbone == "resnet_tiny" and self.head == "bilinear" else "output"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "bilinear" in d and isinstance(d["bilinear"], dict):
            d["bilinear"] = BilinearHeadConfig(**d["bilinear"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- layout
# conv records are (name, cin, cout, k, stride, pad)


def _vgg_plan(cfg: ModelConfig):
    stages = []
    cin = cfg.input_channels
    for s, (width, depth) in enumerate(zip(cfg.widths, cfg.depths), start=1):
        convs = []
        for j in range(1, depth + 1):
            stride = 2 if (s > 1 and j == 1) else 1
            convs.append((f"stage{s}.conv{j}", cin, width, 3, stride, 1))
            cin = width
        stages.append(convs)
    if cfg.attach == "pre_last_conv":
        if sum(len(c) for c in stages) < 2:
            raise ConfigError("pre_last_conv attachment needs at least two convolutions")
        stages[-1] = stages[-1][:-1]
        if not stages[-1]:
            stages.pop()
        cin = stages[-1][-1][2]
    return stages, cin


def _resnet_plan(cfg: ModelConfig):
    stem_w = cfg.widths[0]
    stem = ("stem", cfg.input_channels, stem_w, 3, 2, 1)
    blocks = []
    cin = stem_w
    for b, width in enumerate(cfg.widths, start=1):
        stride = 1 if b == 1 else 2
        blk = {
            "name": f"block{b}",
            "conv1": (f"block{b}.conv1", cin, width, 3, stride, 1),
            "conv2": (f"block{b}.conv2", width, width, 3, 1, 1),
            "proj": (f"block{b}.proj", cin, width, 1, stride, 0) if (cin != width or stride != 1) else None,
        }
        blocks.append(blk)
        cin = width
    if cfg.attach == "pre_last_conv":
        last = blocks[-1]
        last["conv2"] = None
        last["proj"] = None
    return stem, blocks, cin


class Model:
    """Parameters plus the forward pass for one ModelConfig."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.metadata: dict = {}
        self._convs: list[tuple] = []
        if cfg.backbone == "vgg_tiny":
            self._stages, feat_c = _vgg_plan(cfg)
            for st in self._stages:
                self._convs.extend(st)
        else:
            self._stem, self._blocks, feat_c = _resnet_plan(cfg)
            self._convs.append(self._stem)
            for blk in self._blocks:
                self._convs.extend(c for c in (blk["conv1"], blk["conv2"], blk["proj"]) if c is not None)
        self.feature_channels = feat_c
        bcfg = cfg.bilinear
        if cfg.head == "bilinear" and bcfg.reduce_channels > feat_c:
            raise ConfigError(
                f"bilinear reduce_channels {bcfg.reduce_channels} exceeds backbone output channels {feat_c}"
            )
        self.shapes = self._param_shapes()
        if params is None:
            params = self._init_params()
        self.params = params

    # -------------------------------------------------------------- params

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for name, cin, cout, k, _, _ in self._convs:
            shapes[f"{name}.weight"] = (cout, cin, k, k)
            shapes[f"{name}.bias"] = (cout,)
        if self.cfg.head == "bilinear":
            b = self.cfg.bilinear
            shapes["head.reduce.weight"] = (b.reduce_channels, self.feature_channels, 1, 1)
            shapes["head.reduce.bias"] = (b.reduce_channels,)
            shapes["head.fc.weight"] = (b.post_fc_dim, b.feature_dim)
            shapes["head.fc.bias"] = (b.post_fc_dim,)
            reg_in = b.post_fc_dim
        else:
            reg_in = self.feature_channels
        shapes["out.weight"] = (self.cfg.output_dims, reg_in)
        shapes["out.bias"] = (self.cfg.output_dims,)
        return shapes

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(self.cfg.seed)
        params = {}
        for name, shape in self.shapes.items():
            if name.endswith(".bias"):
                val = np.zeros(shape)
                if name == "out.bias":
                    val[:] = self.cfg.output_bias_init
            elif name == "out.weight":
                bound = np.sqrt(6.0 / shape[1])
                val = rng.uniform(-bound, bound, shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                val = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            params[name] = Tensor(val.astype(np.float32), requires_grad=True)
        return params

    def num_parameters(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> Model:
        m = Model(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})
        m.metadata = json.loads(json.dumps(self.metadata))
        return m

    def astype(self, dtype) -> Model:
        m = Model(self.cfg, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()})
        m.metadata = dict(self.metadata)
        return m

    def layer_names(self) -> list[str]:
        names = [c[0] for c in self._convs]
        if self.cfg.head == "bilinear":
            names.append("head.reduce")
        return names

    # -------------------------------------------------------------- forward

    def _conv(self, x, spec, taps):
        name, _, _, _, stride, pad = spec
        y = T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, pad)
        if taps is not None:
            taps[name] = y.data
        return y

    def features(self, x: Tensor, taps: dict | None = None) -> Tensor:
        if self.cfg.backbone == "vgg_tiny":
            for stage in self._stages:
                for spec in stage:
                    x = T.relu(self._conv(x, spec, taps))
            return x
        x = T.relu(self._conv(x, self._stem, taps))
        for blk in self._blocks:
            h = T.relu(self._conv(x, blk["conv1"], taps))
            if blk["conv2"] is None:
                x = h
                continue
            h = self._conv(h, blk["conv2"], taps)
            skip = self._conv(x, blk["proj"], taps) if blk["proj"] is not None else x
            x = T.relu(T.add(h, skip))
        return x

    def forward(
        self,
        x,
        training: bool = False,
        rng: np.random.Generator | None = None,
        taps: dict | None = None,
    ) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params["out.weight"].dtype))
        expect = (self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size)
        if x.data.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"model expects input (N, {', '.join(map(str, expect))}), got {x.shape}")
        f = self.features(x, taps)
        if self.cfg.head == "bilinear":
            head_params = {k[len("head."):]: v for k, v in self.params.items() if k.startswith("head.")}
            if taps is not None:
                taps["head.reduce"] = T.conv2d(f, head_params["reduce.weight"], head_params["reduce.bias"]).data
            z = bilinear_head(f, self.cfg.bilinear, head_params, rng, training)
        else:
            z = T.global_avg_pool(f)
        return T.linear(z, self.params["out.weight"], self.params["out.bias"])

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


# ---------------------------------------------------------------- checkpoints


def _header(model: Model) -> bytes:
    doc = {
        "config": model.cfg.to_dict(),
        "params": [{"name": k, "shape": list(model.shapes[k])} for k in model.shapes],
        "metadata": model.metadata,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: Model, path) -> None:
    header = _header(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in model.shapes:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path, expect: ModelConfig | None = None) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if raw[4] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {raw[4]} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<Q", raw[5:13])
    if 13 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        doc = json.loads(raw[13 : 13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    cfg = ModelConfig.from_dict(doc["config"])
    target = expect if expect is not None else cfg
    shapes = Model(target).shapes
    stored = [(p["name"], tuple(p["shape"])) for p in doc["params"]]
    for (want_name, want_shape), (name, shape) in zip(shapes.items(), stored):
        if want_name != name or want_shape != shape:
            raise CheckpointError(
                f"{path}: parameter {name} {shape} does not match expected {want_name} {want_shape}"
            )
    if len(stored) != len(shapes):
        extra = list(shapes)[len(stored)] if len(shapes) > len(stored) else stored[len(shapes)][0]
        raise CheckpointError(f"{path}: parameter count mismatch at {extra}")
    offset = 13 + hlen
    params = {}
    for name, shape in stored:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for parameter {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    model = Model(target, params)
    model.metadata = doc.get("metadata", {})
    return model
