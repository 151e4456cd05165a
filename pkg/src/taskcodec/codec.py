"""Multi-level convolutional codec with per-level task-error predictors.

One strided-convolution trunk is shared by every compression level. The
smallest non-identity gain reads its latent straight off the trunk; each
higher gain appends its own stride-2 head. Decoding of the base level runs the
main decoder; higher gains first pass through an upsampling adapter that
feeds the main decoder's later stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import _torch
from ._validation import check_signals
from .core import DEFAULT_M, CompressedRecord, LevelSpec, Segment, make_levels

ARCHIVE_KIND = "codec"


class PhaseOrderError(RuntimeError):
    """A training phase was requested before its prerequisite phase ran."""


@dataclass(frozen=True)
class CodecConfig:
    M: int = DEFAULT_M
    levels: tuple = (64, 32, 1)
    trunk_channels: tuple = (16, 24, 32, 48, 64)
    kernel_sizes: tuple = (7, 3, 3, 3, 3)
    head_channels: int = 32
    head_kernel: int = 7
    decoder_channels: tuple = (32, 32, 24, 16, 16)
    predictor_hidden: int = 32

    def __post_init__(self):
        for name in ("levels", "trunk_channels", "kernel_sizes", "decoder_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        specs = make_levels(self.levels, self.M)
        gains = [lv.cg for lv in specs if not lv.is_identity]
        if not gains:
            return
        base = min(gains)
        depth = math.log2(base)
        if depth != int(depth):
            raise ValueError(f"smallest non-identity cg must be a power of two, got {base}")
        for g in gains:
            ratio = math.log2(g / base)
            if ratio != int(ratio):
                raise ValueError(f"cg={g} is not a power-of-two multiple of {base}")
        if len(self.trunk_channels) != int(depth):
            raise ValueError(f"trunk needs log2({base}) = {int(depth)} stride-2 stages, got {len(self.trunk_channels)}")
        if len(self.kernel_sizes) != len(self.trunk_channels):
            raise ValueError("kernel_sizes must match trunk_channels")
        if len(self.decoder_channels) != len(self.trunk_channels):
            raise ValueError("decoder_channels must match trunk_channels")

    @property
    def level_specs(self) -> list[LevelSpec]:
        return make_levels(self.levels, self.M)

    @property
    def base_cg(self) -> int | None:
        gains = [g for g in self.levels if g != 1]
        return min(gains) if gains else None


def _conv(c_in, c_out, k, stride=1):
    return nn.Conv1d(c_in, c_out, k, stride=stride, padding=k // 2)


class LevelHead(nn.Module):
    """Extra stride-2 stages (possibly none) followed by a 1-channel latent conv."""

    def __init__(self, c_in: int, doublings: int, channels: int, kernel: int):
        super().__init__()
        layers = []
        for _ in range(doublings):
            layers += [_conv(c_in, channels, kernel, stride=2), nn.ELU()]
            c_in = channels
        self.pre = nn.Sequential(*layers)
        self.to_latent = _conv(c_in, 1, 3)
        self.feature_channels = c_in

    def forward(self, h):
        feats = self.pre(h)
        return feats, self.to_latent(feats).squeeze(1)


class ErrorPredictor(nn.Module):
    """Global average pooling, dense layer(s), ReLU: a nonnegative scalar.

    Pooled features are standardized with fixed statistics (buffers) that
    phase-3 training sets from the training data.
    """

    def __init__(self, c_in: int, hidden: int = 0):
        super().__init__()
        self.register_buffer("feat_mean", torch.zeros(c_in))
        self.register_buffer("feat_scale", torch.ones(c_in))
        if hidden:
            self.dense = nn.Sequential(nn.Linear(c_in, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        else:
            self.dense = nn.Linear(c_in, 1)

    @property
    def output_layer(self) -> nn.Linear:
        return self.dense[-1] if isinstance(self.dense, nn.Sequential) else self.dense

    def pool(self, feats):
        return (feats.mean(dim=-1) - self.feat_mean) / self.feat_scale

    def pre_activation(self, feats):
        return self.dense(self.pool(feats)).squeeze(-1)

    def forward(self, feats):
        return torch.relu(self.pre_activation(feats))


class DecoderStage(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.body = nn.Sequential(_conv(c_in, c_out, 3), nn.ELU(), nn.Upsample(scale_factor=2),
                                  _conv(c_out, c_out, 3), nn.ELU())

    def forward(self, h):
        return self.body(h)


def _adapter(doublings: int, c_out: int) -> nn.Sequential:
    # conv(16,7), conv(32,3), Upsample(2), then [conv(., 3), Upsample(2)] per doubling
    layers = [_conv(1, 16, 7), nn.ELU(), _conv(16, 32, 3), nn.ELU(), nn.Upsample(scale_factor=2)]
    for i in range(doublings):
        width = c_out if i == doublings - 1 else 32
        layers += [_conv(32, width, 3), nn.ELU(), nn.Upsample(scale_factor=2)]
    return nn.Sequential(*layers)


class CodecNet(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_cg
        stages, c_in = [], 1
        for c, k in zip(cfg.trunk_channels, cfg.kernel_sizes):
            stages.append(nn.Sequential(_conv(c_in, c, k, stride=2), nn.ELU(), _conv(c, c, 3), nn.ELU()))
            c_in = c
        self.trunk = nn.Sequential(*stages)
        self.heads = nn.ModuleDict()
        self.predictors = nn.ModuleDict()
        self.adapters = nn.ModuleDict()
        dec = list(cfg.decoder_channels)
        for g in sorted(g for g in cfg.levels if g != 1):
            doublings = int(math.log2(g // base))
            head = LevelHead(c_in, doublings, cfg.head_channels, cfg.head_kernel)
            self.heads[str(g)] = head
            self.predictors[str(g)] = ErrorPredictor(head.feature_channels, cfg.predictor_hidden)
            if doublings:
                self.adapters[str(g)] = _adapter(doublings, dec[0])
        self.decoder = nn.ModuleList()
        if base is not None:
            c_prev = 1
            for c in dec:
                self.decoder.append(DecoderStage(c_prev, c))
                c_prev = c
            self.out = _conv(c_prev, 1, 7)

    def decode_latent(self, z: torch.Tensor, cg: int) -> torch.Tensor:
        h = z.unsqueeze(1)
        if cg == self.cfg.base_cg:
            stages = self.decoder
        else:
            h = self.adapters[str(cg)](h)
            stages = self.decoder[1:]
        for stage in stages:
            h = stage(h)
        return self.out(h).squeeze(1)


class MultiLevelCodec(TransformerMixin, BaseEstimator):
    """Variable-rate codec following the scikit-learn transformer protocol.

    ``fit`` runs the reconstruction-only training phase; the task-aware and
    predictor phases live in :mod:`taskcodec.training`. ``transform`` and
    ``inverse_transform`` operate at ``transform_level`` (default: the
    highest gain).

    Parameters
    ----------
    M : int
        Segment length in samples.
    levels : tuple of int
        Compression gains; must include 1.
    trunk_channels, kernel_sizes : tuple of int
        One entry per stride-2 trunk stage.
    head_channels, head_kernel : int
        Width and kernel of the extra stride-2 layer(s) of higher-gain heads.
    decoder_channels : tuple of int
        Widths of the main decoder's upsampling stages.
    predictor_hidden : int
        Hidden width of the error predictor; 0 means a single dense layer.
    identity_error : float
        Fixed predicted error of the identity level.
    epochs : int
        Epochs used by ``fit``.
    seed : int
    """

    def __init__(self, M=DEFAULT_M, levels=(64, 32, 1), trunk_channels=(16, 24, 32, 48, 64),
                 kernel_sizes=(7, 3, 3, 3, 3), head_channels=32, head_kernel=7,
                 decoder_channels=(32, 32, 24, 16, 16), predictor_hidden=32, identity_error=0.0,
                 transform_level=None, epochs=30, seed=0):
        self.M = M
        self.levels = levels
        self.trunk_channels = trunk_channels
        self.kernel_sizes = kernel_sizes
        self.head_channels = head_channels
        self.head_kernel = head_kernel
        self.decoder_channels = decoder_channels
        self.predictor_hidden = predictor_hidden
        self.identity_error = identity_error
        self.transform_level = transform_level
        self.epochs = epochs
        self.seed = seed

    # -- construction -------------------------------------------------------

    @property
    def config(self) -> CodecConfig:
        return CodecConfig(self.M, tuple(self.levels), tuple(self.trunk_channels), tuple(self.kernel_sizes),
                           self.head_channels, self.head_kernel, tuple(self.decoder_channels),
                           self.predictor_hidden)

    def initialize(self, dtype=torch.float32):
        """Build fresh, deterministically seeded parameters."""
        cfg = self.config
        _torch.seed_everything(self.seed)
        self.net_ = CodecNet(cfg).to(dtype)
        self.net_.eval()
        self.level_specs_ = cfg.level_specs
        self.phase_ = 0
        self.trunk_calls_ = 0
        return self

    def fit(self, X, y=None):
        from .training import TrainConfig, train_phase1

        self.initialize()
        train_phase1(self, X, TrainConfig(epochs_phase1=self.epochs, seed=self.seed))
        return self

    # -- helpers ------------------------------------------------------------

    def level(self, cg) -> LevelSpec:
        check_is_fitted(self, "net_")
        cg = cg.cg if isinstance(cg, LevelSpec) else int(cg)
        for lv in self.level_specs_:
            if lv.cg == cg:
                return lv
        raise ValueError(f"unknown level cg={cg}; configured levels are {[lv.cg for lv in self.level_specs_]}")

    @property
    def dtype(self):
        return _torch.module_dtype(self.net_)

    def _inputs(self, X):
        check_is_fitted(self, "net_")
        if isinstance(X, Segment):
            X = X.samples
        single = np.ndim(X) == 1
        X = check_signals(np.atleast_2d(X), self.M)
        return X, single

    def _trunk(self, x: torch.Tensor) -> torch.Tensor:
        self.trunk_calls_ += 1
        return self.net_.trunk(x.unsqueeze(1))

    def forward_level(self, x: torch.Tensor, cg: int, trunk_out=None):
        """Differentiable ``(latent, pre-latent features)`` for a non-identity level."""
        h = self._trunk(x) if trunk_out is None else trunk_out
        feats, z = self.net_.heads[str(cg)](h)
        return z, feats

    @staticmethod
    def _group_of(name: str) -> str:
        top = name.split(".")[0]
        return "decoder" if top in ("decoder", "out") else top

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        check_is_fitted(self, "net_")
        groups = {"trunk": [], "heads": [], "predictors": [], "decoder": [], "adapters": []}
        for name, p in self.net_.named_parameters():
            groups[self._group_of(name)].append((name, p))
        return groups

    def checksum(self, groups=("trunk", "heads", "predictors", "decoder", "adapters")) -> str:
        """Digest of the parameters and buffers in ``groups``."""
        check_is_fitted(self, "net_")
        state = self.net_.state_dict()
        return _torch.checksum([(k, v) for k, v in state.items() if self._group_of(k) in groups])

    # -- encode / decode ----------------------------------------------------

    def encode(self, X, level) -> np.ndarray:
        """Latent(s) of length ``M / cg``; the identity level returns the input unchanged."""
        X, single = self._inputs(X)
        lv = self.level(level)
        if lv.is_identity:
            Z = X.copy()
        else:
            with torch.no_grad():
                z, _ = self.forward_level(_torch.as_tensor(X, self.dtype), lv.cg)
            Z = z.numpy().astype(np.float64)
        return Z[0] if single else Z

    def predict_error(self, X, level) -> np.ndarray:
        """Predicted weighted task error (nonnegative) at ``level``."""
        X, single = self._inputs(X)
        lv = self.level(level)
        if lv.is_identity:
            out = np.full(len(X), float(self.identity_error))
        else:
            with torch.no_grad():
                _, feats = self.forward_level(_torch.as_tensor(X, self.dtype), lv.cg)
                out = self.net_.predictors[str(lv.cg)](feats).numpy().astype(np.float64)
        return out[0] if single else out

    def encode_all(self, X):
        """Every level's latent and predicted error from a single trunk pass.

        Returns a list of ``(LevelSpec, latents, predicted_errors)`` sorted by
        descending gain.
        """
        X, single = self._inputs(X)
        out = []
        with torch.no_grad():
            x = _torch.as_tensor(X, self.dtype)
            h = self._trunk(x) if any(not lv.is_identity for lv in self.level_specs_) else None
            for lv in self.level_specs_:
                if lv.is_identity:
                    z, err = X.copy(), np.full(len(X), float(self.identity_error))
                else:
                    zt, feats = self.forward_level(x, lv.cg, trunk_out=h)
                    z = zt.numpy().astype(np.float64)
                    err = self.net_.predictors[str(lv.cg)](feats).numpy().astype(np.float64)
                out.append((lv, z[0] if single else z, err[0] if single else err))
        return out

    def decode(self, Z, level) -> np.ndarray:
        """Reconstruct length-``M`` signals from latents at ``level``."""
        check_is_fitted(self, "net_")
        lv = self.level(level)
        single = np.ndim(Z) == 1
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != lv.latent_len:
            raise ValueError(f"latent length {Z.shape[1]} does not match cg={lv.cg} (expected {lv.latent_len})")
        if lv.is_identity:
            out = Z.copy()
        else:
            with torch.no_grad():
                out = self.net_.decode_latent(_torch.as_tensor(Z, self.dtype), lv.cg).numpy().astype(np.float64)
        return out[0] if single else out

    def decode_record(self, record: CompressedRecord) -> np.ndarray:
        record.check_against(self.M)
        return self.decode(record.latent.astype(np.float64), record.cg)

    def reconstruct(self, X, level) -> np.ndarray:
        return self.decode(self.encode(X, level), level)

    def reconstruct_tensor(self, x: torch.Tensor, cg: int, trunk_out=None) -> torch.Tensor:
        """Differentiable encode-then-decode for training."""
        if cg == 1:
            return x
        z, _ = self.forward_level(x, cg, trunk_out)
        return self.net_.decode_latent(z, cg)

    def transform(self, X):
        return self.encode(X, self._transform_cg())

    def inverse_transform(self, Z):
        return self.decode(Z, self._transform_cg())

    def _transform_cg(self):
        check_is_fitted(self, "net_")
        return self.transform_level if self.transform_level is not None else self.level_specs_[0].cg

    # -- persistence --------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        check_is_fitted(self, "net_")
        meta = {"phase": self.phase_, **(extra or {})}
        params = self.get_params()
        params["levels"] = list(params["levels"])
        _torch.save_archive(path, ARCHIVE_KIND, params, self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path, expect: CodecConfig | None = None) -> "MultiLevelCodec":
        params, state, extra = _torch.load_archive(path, ARCHIVE_KIND)
        codec = cls(**params)
        if expect is not None and codec.config != expect:
            raise ValueError(f"{path}: checkpoint config {codec.config} does not match expected {expect}")
        dtype = next(iter(state.values())).dtype if state else torch.float32
        codec.initialize(dtype)
        try:
            codec.net_.load_state_dict(state)
        except RuntimeError as exc:
            raise ValueError(f"{path}: parameters do not match the stored config: {exc}") from None
        codec.phase_ = int(extra.get("phase", 0))
        return codec


# -- free functions over Segments ------------------------------------------


def encode(segment: Segment, level, codec: MultiLevelCodec) -> np.ndarray:
    return codec.encode(segment.samples, level)


def predict_error(segment: Segment, level, codec: MultiLevelCodec) -> float:
    return float(codec.predict_error(segment.samples, level))


def encode_all(segment: Segment, codec: MultiLevelCodec):
    return codec.encode_all(segment.samples)


def decode(record: CompressedRecord, codec: MultiLevelCodec) -> np.ndarray:
    return codec.decode_record(record)


def compress(segment: Segment, level, codec: MultiLevelCodec) -> CompressedRecord:
    lv = codec.level(level)
    return CompressedRecord(segment.id, lv.cg, codec.encode(segment.samples, lv),
                            codec.predict_error(segment.samples, lv))


def count_parameters(codec: MultiLevelCodec, grouping: str = "group") -> dict[str, int]:
    """Parameter counts per group (or per group and level with ``grouping="level"``).

    Shared parameters are counted once; ``total`` sums every group.
    """
    check_is_fitted(codec, "net_")
    counts: dict[str, int] = {}
    for group, items in codec.parameter_groups().items():
        for name, p in items:
            if grouping == "level" and group in ("heads", "predictors", "adapters"):
                key = f"{group}[{name.split('.')[1]}]"
            else:
                key = group
            counts[key] = counts.get(key, 0) + p.numel()
    for group in ("trunk", "heads", "predictors", "decoder", "adapters"):
        if grouping != "level" or group in ("trunk", "decoder"):
            counts.setdefault(group, 0)
    counts["total"] = sum(v for k, v in counts.items())
    return counts


def encoder_parameters(codec: MultiLevelCodec) -> int:
    """Edge-side parameters: trunk, heads and predictors."""
    c = count_parameters(codec)
    return c["trunk"] + c["heads"] + c["predictors"]


def independent_encoder_parameters(codec: MultiLevelCodec, n_encoders: int | None = None) -> int:
    """Edge-side parameters if every level had its own unshared encoder.

    Each hypothetical encoder is a private trunk plus one level's head and
    predictor. ``n_encoders`` defaults to the number of configured levels; the
    identity slot uses the base level's architecture.
    """
    c = count_parameters(codec, "level")
    gains = sorted((lv.cg for lv in codec.level_specs_ if not lv.is_identity), reverse=True)
    if not gains:
        return 0
    n = len(codec.level_specs_) if n_encoders is None else n_encoders
    per_level = [c["trunk"] + c.get(f"heads[{g}]", 0) + c.get(f"predictors[{g}]", 0) for g in gains]
    per_level += [per_level[-1]] * max(0, n - len(per_level))
    return sum(per_level[:n])
