"""FTFDNet family: two-branch residual CNN with optional audio-visual attention."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .audio import LOG_FLOOR, N_MELS
from .rng import stream
from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    batch_norm,
    channel_avg_pool,
    channel_max_pool,
    concat_channels,
    conv2d,
    dropout,
    fully_connected,
    global_avg_pool,
    mul_broadcast,
    relu,
    sigmoid,
    stable_sigmoid,
)
from .tensor import add as t_add

NUM_STAGES = 5
FUSED_STAGES = (2, 3, 4)  # zero-based: the last three stages
ATTN_KERNEL = 7

# variant name -> (branches, attention)
VARIANTS = {
    "audio": ("audio", "none"),
    "visual": ("visual", "none"),
    "ftfdnet": ("audio-visual", "none"),
    "ftfdnet-avam": ("audio-visual", "avam"),
    "ftfdnet-cbam": ("audio-visual", "cbam_spatial"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    branches: str = "audio-visual"
    attention: str = "none"
    T: int = 3
    crop: int = 96
    stage_channels: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    stage_strides: list = field(default_factory=lambda: [1, 2, 2, 2, 2])
    dropout_p: float = 0.5
    fc_dims: list = field(default_factory=lambda: [512, 128, 1])
    n_mels: int = N_MELS
    audio_steps: int = 96

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.stage_strides = list(self.stage_strides)
        self.fc_dims = list(self.fc_dims)
        if self.branches not in ("audio", "visual", "audio-visual"):
            raise ConfigError(f"unknown branches {self.branches!r}")
        if self.attention not in ("none", "avam", "cbam_spatial"):
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.attention != "none" and self.branches != "audio-visual":
            raise ConfigError("attention modules need both branches")
        if len(self.stage_channels) != NUM_STAGES or len(self.stage_strides) != NUM_STAGES:
            raise ConfigError(f"exactly {NUM_STAGES} stages required")
        if len(self.fc_dims) != 3 or self.fc_dims[-1] != 1:
            raise ConfigError(f"fc_dims must be three layers ending in 1, got {self.fc_dims}")
        if self.T < 1 or self.crop < 1:
            raise ConfigError(f"invalid T={self.T} / crop={self.crop}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        branches, attention = VARIANTS[variant]
        return cls(branches=branches, attention=attention, **overrides)

    @classmethod
    def desk(cls, variant: str = "ftfdnet-avam", **overrides) -> "ModelConfig":
        """Small preset that trains on one CPU core in minutes."""
        params = dict(crop=48, stage_channels=[8, 12, 16, 24, 32], stage_strides=[2, 2, 2, 2, 1],
                      fc_dims=[64, 32, 1], audio_steps=16, dropout_p=0.1)
        params.update(overrides)
        return cls.for_variant(variant, **params)

    @property
    def variant(self) -> str:
        for name, spec in VARIANTS.items():
            if spec == (self.branches, self.attention):
                return name
        raise ConfigError("inconsistent branches/attention")  # unreachable after validation

    @property
    def uses_visual(self) -> bool:
        return self.branches in ("visual", "audio-visual")

    @property
    def uses_audio(self) -> bool:
        return self.branches in ("audio", "audio-visual")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardResult:
    logit: Tensor
    attention_maps: list = field(default_factory=list)


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FTFDModel:
    """Parameters, batch-norm statistics and the forward pass."""

    def __init__(self, config: ModelConfig, params: dict, bn: dict):
        self.config = config
        self.params: dict[str, Tensor] = params
        self.bn: dict[str, BatchNormState] = bn

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "FTFDModel":
        rng = stream(seed, "init")
        params: dict[str, Tensor] = {}
        bn: dict[str, BatchNormState] = {}

        def conv(name, cout, cin, k, with_bias):
            params[f"{name}.w"] = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k), requires_grad=True, name=f"{name}.w")
            if with_bias:
                params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

        def norm(name, c):
            params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True, name=f"{name}.gamma")
            params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.beta")
            bn[name] = BatchNormState(c)

        def branch(prefix, cin):
            for s, (cout, stride) in enumerate(zip(config.stage_channels, config.stage_strides)):
                p = f"{prefix}.s{s + 1}"
                conv(f"{p}.conv1", cout, cin, 3, False)
                norm(f"{p}.bn1", cout)
                conv(f"{p}.conv2", cout, cout, 3, False)
                norm(f"{p}.bn2", cout)
                if cin != cout or stride != 1:
                    conv(f"{p}.proj", cout, cin, 1, True)
                cin = cout

        if config.uses_visual:
            branch("visual", 3 * config.T)
        if config.uses_audio:
            branch("audio", 1)
        if config.attention == "avam":
            branch("siamese", 1)
            for s in range(NUM_STAGES):
                for part in ("avg", "max", "fuse"):
                    conv(f"attn.s{s + 1}.{part}", 1, 2, ATTN_KERNEL, True)
        elif config.attention == "cbam_spatial":
            for s in range(NUM_STAGES):
                conv(f"attn.s{s + 1}.fuse", 1, 2, ATTN_KERNEL, True)

        din = 0
        for s in FUSED_STAGES:
            c = config.stage_channels[s]
            din += c * (int(config.uses_visual) + int(config.uses_audio))
        for i, dout in enumerate(config.fc_dims):
            params[f"fc{i + 1}.w"] = Tensor(_kaiming(rng, (dout, din), din), requires_grad=True, name=f"fc{i + 1}.w")
            params[f"fc{i + 1}.b"] = Tensor(np.zeros(dout), requires_grad=True, name=f"fc{i + 1}.b")
            din = dout
        return cls(config, params, bn)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks ------------------------------------------------------

    def residual_stage(self, x: Tensor, prefix: str, stride: int, train: bool) -> Tensor:
        P = self.params
        w1 = P[f"{prefix}.conv1.w"]
        if x.ndim != 4 or x.shape[1] != w1.shape[1]:
            raise ShapeError(f"{prefix}: expected {w1.shape[1]} input channels, got shape {x.shape}")
        h = conv2d(x, w1, None, stride, 1)
        h = relu(batch_norm(h, P[f"{prefix}.bn1.gamma"], P[f"{prefix}.bn1.beta"], self.bn[f"{prefix}.bn1"], train))
        h = conv2d(h, P[f"{prefix}.conv2.w"], None, 1, 1)
        h = relu(batch_norm(h, P[f"{prefix}.bn2.gamma"], P[f"{prefix}.bn2.beta"], self.bn[f"{prefix}.bn2"], train))
        if f"{prefix}.proj.w" in P:
            shortcut = conv2d(x, P[f"{prefix}.proj.w"], P[f"{prefix}.proj.b"], stride, 0)
        else:
            shortcut = x
        return t_add(h, shortcut)

    # -- forward --------------------------------------------------------------

    def forward(self, visual: Optional[np.ndarray] = None, mels: Optional[np.ndarray] = None,
                resized: Optional[np.ndarray] = None, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Compute the real/fake logit for a batch.

        Args:
            visual: (B, 3T, crop, crop) stacked face crops in [0, 1].
            mels: (B, 1, n_mels, audio_steps) log-mel branch input.
            resized: (B, 1, crop, crop) spectrogram resized to the crop, for AVAM.
            train: batch-norm/dropout mode.
            rng: dropout generator, required in train mode.
        """
        cfg = self.config
        strides = cfg.stage_strides
        batch = self._check_inputs(visual, mels, resized)
        feats: list[Tensor] = []
        maps: list[Tensor] = []

        v_out: list[Tensor] = []
        if cfg.uses_visual:
            v = Tensor(visual)
            a = Tensor(normalize_logmel(resized)) if cfg.attention == "avam" else None
            for s in range(NUM_STAGES):
                v = self.residual_stage(v, f"visual.s{s + 1}", strides[s], train)
                if cfg.attention == "avam":
                    a = self.residual_stage(a, f"siamese.s{s + 1}", strides[s], train)
                    v, m = avam(v, a, self.attention_params(s))
                    maps.append(m)
                elif cfg.attention == "cbam_spatial":
                    v, m = cbam_spatial(v, self.params[f"attn.s{s + 1}.fuse.w"], self.params[f"attn.s{s + 1}.fuse.b"])
                    maps.append(m)
                v_out.append(v)

        a_out: list[Tensor] = []
        if cfg.uses_audio:
            x = Tensor(normalize_logmel(mels))
            for s in range(NUM_STAGES):
                x = self.residual_stage(x, f"audio.s{s + 1}", strides[s], train)
                a_out.append(x)

        for s in FUSED_STAGES:
            # channel concat then global pooling == pooling each branch then concat
            parts = []
            if v_out:
                parts.append(global_avg_pool(v_out[s]))
            if a_out:
                parts.append(global_avg_pool(a_out[s]))
            feats.append(parts[0] if len(parts) == 1 else concat_channels(parts[0], parts[1]))
        h = feats[0]
        for f in feats[1:]:
            h = concat_channels(h, f)

        P = self.params
        h = dropout(relu(fully_connected(h, P["fc1.w"], P["fc1.b"])), cfg.dropout_p, train, rng)
        h = dropout(relu(fully_connected(h, P["fc2.w"], P["fc2.b"])), cfg.dropout_p, train, rng)
        logit = fully_connected(h, P["fc3.w"], P["fc3.b"])
        assert logit.shape == (batch, 1)
        return ForwardResult(logit, maps)

    def attention_params(self, s: int) -> dict:
        P = self.params
        return {part: (P[f"attn.s{s + 1}.{part}.w"], P[f"attn.s{s + 1}.{part}.b"]) for part in ("avg", "max", "fuse")}

    def _check_inputs(self, visual, mels, resized) -> int:
        cfg = self.config
        batch = None
        if cfg.uses_visual:
            if visual is None:
                raise ShapeError("this variant needs visual input")
            want = (3 * cfg.T, cfg.crop, cfg.crop)
            if visual.ndim != 4 or visual.shape[1:] != want:
                raise ShapeError(f"visual input must be (B, {want[0]}, {want[1]}, {want[2]}) for T={cfg.T}, got {visual.shape}")
            batch = visual.shape[0]
        if cfg.uses_audio:
            if mels is None:
                raise ShapeError("this variant needs the audio spectrogram")
            want = (1, cfg.n_mels, cfg.audio_steps)
            if mels.ndim != 4 or mels.shape[1:] != want:
                raise ShapeError(f"audio input must be (B, {want[0]}, {want[1]}, {want[2]}), got {mels.shape}")
            if batch is not None and mels.shape[0] != batch:
                raise ShapeError(f"batch sizes differ: visual {batch}, audio {mels.shape[0]}")
            batch = mels.shape[0]
        if cfg.attention == "avam":
            if resized is None:
                raise ShapeError("AVAM needs the resized spectrogram for the siamese branch")
            want = (batch, 1, cfg.crop, cfg.crop)
            if resized.shape != want:
                raise ShapeError(f"resized spectrogram must be {want}, got {resized.shape}")
        return batch

    def predict_proba(self, visual=None, mels=None, resized=None) -> np.ndarray:
        logit = self.forward(visual, mels, resized, train=False).logit
        return stable_sigmoid(logit.data[:, 0])

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"bn:{name}.running_mean"] = st.running_mean
            out[f"bn:{name}.running_var"] = st.running_var
        return out

    def save(self, path) -> None:
        path = Path(path)
        checkpoint.save_tensors(path, self.state_arrays())
        config_sidecar(path).write_text(json.dumps(self.config.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FTFDModel":
        path = Path(path)
        sidecar = config_sidecar(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        if not sidecar.exists():
            raise FileNotFoundError(f"checkpoint config sidecar not found: {sidecar}")
        config = ModelConfig.from_dict(json.loads(sidecar.read_text()))
        model = cls.init(config, seed=0)
        model.load_state(checkpoint.load_tensors(path))
        return model

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))[:5]
            extra = sorted(set(arrays) - expected)[:5]
            raise checkpoint.CheckpointError(f"checkpoint does not match config (missing {missing}, unexpected {extra})")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise checkpoint.CheckpointError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].copy()
        for name, st in self.bn.items():
            st.running_mean = arrays[f"bn:{name}.running_mean"].copy()
            st.running_var = arrays[f"bn:{name}.running_var"].copy()


def normalize_logmel(x: np.ndarray) -> np.ndarray:
    """Map log-mel values so the silence floor becomes 0 and unit loudness about 1."""
    return (np.asarray(x) - LOG_FLOOR) / -LOG_FLOOR


def config_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def init_parameters(config: ModelConfig, seed: int = 0) -> FTFDModel:
    return FTFDModel.init(config, seed)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _attn_conv(x: Tensor, wb) -> Tensor:
    w, b = wb
    return conv2d(x, w, b, 1, ATTN_KERNEL // 2)


def avam(f_v: Tensor, f_a: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """Audio-visual spatial attention.

    ``params`` maps ``"avg"``, ``"max"`` and ``"fuse"`` to (weight, bias)
    pairs of 2->1 channel 7x7 convolutions. Returns the refined visual map
    and the attention map of shape (B, 1, H, W).
    """
    if f_v.ndim != 4 or f_a.ndim != 4 or f_v.shape[0] != f_a.shape[0] or f_v.shape[2:] != f_a.shape[2:]:
        raise ShapeError(f"avam: visual {f_v.shape} and audio {f_a.shape} must share batch and spatial extents")
    desc_avg = concat_channels(channel_avg_pool(f_v), channel_avg_pool(f_a))
    desc_max = concat_channels(channel_max_pool(f_v), channel_max_pool(f_a))
    mid = concat_channels(sigmoid(_attn_conv(desc_avg, params["avg"])), sigmoid(_attn_conv(desc_max, params["max"])))
    m = sigmoid(_attn_conv(mid, params["fuse"]))
    return mul_broadcast(f_v, m), m


def cbam_spatial(f_v: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Spatial-only CBAM: visual channel pooling, one 7x7 conv, sigmoid."""
    desc = concat_channels(channel_avg_pool(f_v), channel_max_pool(f_v))
    m = sigmoid(conv2d(desc, weight, bias, 1, ATTN_KERNEL // 2))
    return mul_broadcast(f_v, m), m


def predict(logit) -> np.ndarray:
    """Probability of FAKE; > 0.5 means fake, exactly 0.5 is reported as fake too."""
    z = logit.data if isinstance(logit, Tensor) else np.asarray(logit, dtype=np.float64)
    return stable_sigmoid(np.atleast_1d(z))


def is_fake(prob) -> np.ndarray:
    return np.asarray(prob) >= 0.5


def write_pgm(path, attention_map: np.ndarray) -> None:
    """8-bit binary PGM (P5) of a map with values in [0, 1]."""
    m = np.asarray(attention_map, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D map, got {m.shape}")
    pix = np.clip(np.floor(m * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if head is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in head.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=head.end()).reshape(h, w)
