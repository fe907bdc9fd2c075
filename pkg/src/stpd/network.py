"""Unrolled spatial-temporal primal-dual reconstruction network.

K iteration blocks, each with a dual net updating the sinogram-space
variable h and a primal net updating the image-space variable x. The
physics operator and its adjoint are embedded between the nets, each
followed by a learnable single-channel correction convolution initialized
to the identity so training starts from the pure physics model. Updates are
residual: h <- h + D(h, corr(G x[pc]), y), x <- x + P(x, corr(G* h[dc])).

Temporal kernel extent 3 couples neighboring frames through every
convolution; extent 1 removes all temporal mixing and yields the
frame-independent variant used as a comparison baseline.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import precision, tensorio
from .projector import ProjectorGeometry


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_blocks: int = 10
    n_primal: int = 3
    n_dual: int = 3
    hidden_channels: int = 32
    conv_depth: int = 3
    temporal_extent: int = 3
    correction_convs: bool = True
    primal_project_channel: int = 1
    dual_project_channel: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if min(self.n_primal, self.n_dual, self.hidden_channels) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.conv_depth < 1:
            raise ValueError("conv_depth must be >= 1")
        if self.temporal_extent not in (1, 3):
            raise ValueError("temporal_extent must be 1 or 3")
        if not 0 <= self.primal_project_channel < self.n_primal:
            raise ValueError("primal_project_channel out of range")
        if not 0 <= self.dual_project_channel < self.n_dual:
            raise ValueError("dual_project_channel out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class ConvLayer:
    weight: ad.Node
    bias: ad.Node
    bn: ad.BatchNormState | None = None


@dataclass
class BlockParams:
    dual: list[ConvLayer] = field(default_factory=list)
    primal: list[ConvLayer] = field(default_factory=list)
    corr_forward: ConvLayer | None = None
    corr_adjoint: ConvLayer | None = None


@dataclass
class NetworkParams:
    config: NetworkConfig
    blocks: list[BlockParams]

    def parameters(self) -> list[ad.Node]:
        out: list[ad.Node] = []
        for blk in self.blocks:
            for layer in blk.dual + blk.primal:
                out += [layer.weight, layer.bias]
                if layer.bn is not None:
                    out += [layer.bn.gamma, layer.bn.beta]
            for corr in (blk.corr_forward, blk.corr_adjoint):
                if corr is not None:
                    out += [corr.weight, corr.bias]
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (parameters and BN running statistics)."""
        out: dict[str, np.ndarray] = {}
        for k, blk in enumerate(self.blocks):
            for net_name, layers in (("dual", blk.dual), ("primal", blk.primal)):
                for i, layer in enumerate(layers):
                    base = f"block{k:02d}.{net_name}{i}"
                    out[f"{base}.weight"] = layer.weight.value
                    out[f"{base}.bias"] = layer.bias.value
                    if layer.bn is not None:
                        out[f"{base}.bn.gamma"] = layer.bn.gamma.value
                        out[f"{base}.bn.beta"] = layer.bn.beta.value
                        out[f"{base}.bn.running_mean"] = layer.bn.running_mean
                        out[f"{base}.bn.running_var"] = layer.bn.running_var
            for corr_name, corr in (("corr_fwd", blk.corr_forward),
                                    ("corr_adj", blk.corr_adjoint)):
                if corr is not None:
                    out[f"block{k:02d}.{corr_name}.weight"] = corr.weight.value
                    out[f"block{k:02d}.{corr_name}.bias"] = corr.bias.value
        return out


def _layer_channels(cfg: NetworkConfig, n_in: int, n_out: int) -> list[tuple[int, int]]:
    if cfg.conv_depth == 1:
        return [(n_in, n_out)]
    dims = [n_in] + [cfg.hidden_channels] * (cfg.conv_depth - 1) + [n_out]
    return list(zip(dims[:-1], dims[1:]))


def _init_layers(cfg: NetworkConfig, rng, n_in: int, n_out: int, dtype) -> list[ConvLayer]:
    kt = cfg.temporal_extent
    layers = []
    chans = _layer_channels(cfg, n_in, n_out)
    for li, (ci, co) in enumerate(chans):
        std = np.sqrt(2.0 / (ci * kt * 9))
        w = (rng.standard_normal((co, ci, kt, 3, 3)) * std).astype(dtype)
        bn = ad.BatchNormState.create(co, dtype)
        if li == len(chans) - 1:
            # Zero the scale of the normalization that follows the last
            # convolution: the residual branch contributes exactly nothing
            # at initialization but keeps a live gradient path (zeroing the
            # convolution itself would be undone by the normalization and
            # starts training from a degenerate zero-variance batch).
            bn.gamma.value = np.zeros(co, dtype=dtype)
        layers.append(ConvLayer(
            weight=ad.parameter(w),
            bias=ad.parameter(np.zeros(co, dtype=dtype)),
            bn=bn,
        ))
    return layers


def _identity_corr(cfg: NetworkConfig, dtype) -> ConvLayer:
    kt = cfg.temporal_extent
    w = np.zeros((1, 1, kt, 3, 3), dtype=dtype)
    w[0, 0, kt // 2, 1, 1] = 1.0
    return ConvLayer(weight=ad.parameter(w),
                     bias=ad.parameter(np.zeros(1, dtype=dtype)), bn=None)


def init_network(cfg: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Fresh parameters: fan-in-scaled Gaussian convolutions, the
    normalization scale after each net's final convolution zeroed (residual
    updates start at exactly zero, so the whole network starts as the
    identity on the zero initial state), correction convolutions at the
    identity kernel."""
    rng = np.random.default_rng(seed)
    dtype = precision.dtype()
    blocks = []
    for _ in range(cfg.n_blocks):
        blk = BlockParams(
            dual=_init_layers(cfg, rng, cfg.n_dual + 2, cfg.n_dual, dtype),
            primal=_init_layers(cfg, rng, cfg.n_primal + 1, cfg.n_primal, dtype),
        )
        if cfg.correction_convs:
            blk.corr_forward = _identity_corr(cfg, dtype)
            blk.corr_adjoint = _identity_corr(cfg, dtype)
        blocks.append(blk)
    return NetworkParams(cfg, blocks)


def randomize_parameters(params: NetworkParams, seed: int, scale: float = 0.1) -> None:
    """Overwrite every weight with seeded Gaussian noise (used by gradient
    checks, where zeroed final layers would make most of the graph
    unreachable)."""
    rng = np.random.default_rng(seed)
    for p in params.parameters():
        p.value = (rng.standard_normal(p.value.shape) * scale).astype(p.value.dtype)


def _apply_net(layers: list[ConvLayer], x: ad.Node, training: bool) -> ad.Node:
    out = x
    for li, layer in enumerate(layers):
        out = ad.conv3d(out, layer.weight, layer.bias)
        if layer.bn is not None:
            out = ad.batch_norm(out, layer.bn, training)
        if li < len(layers) - 1:
            out = ad.relu(out)
    return out


def _apply_corr(corr: ConvLayer | None, x: ad.Node) -> ad.Node:
    if corr is None:
        return x
    return ad.conv3d(x, corr.weight, corr.bias)


def forward(params: NetworkParams, y: np.ndarray, geom: ProjectorGeometry,
            training: bool = False) -> ad.Node:
    """Run the unrolled iteration on a (N, T, V, B) sinogram batch.

    Returns the first primal channel as a (N, 1, T, H, W) node; both primal
    and dual states start at zero.
    """
    cfg = params.config
    y = np.asarray(y, dtype=precision.dtype())
    if y.ndim != 4 or y.shape[2:] != geom.sinogram_shape:
        raise ValueError(f"sinogram batch shape {y.shape} does not match geometry")
    N, T = y.shape[:2]
    H, W = geom.image_shape

    y_node = ad.constant(y[:, None])  # (N,1,T,V,B)
    x = ad.constant(np.zeros((N, cfg.n_primal, T, H, W), dtype=y.dtype))
    h = ad.constant(np.zeros((N, cfg.n_dual, T) + geom.sinogram_shape, dtype=y.dtype))

    for blk in params.blocks:
        xc = ad.slice_channel(x, cfg.primal_project_channel)
        p = _apply_corr(blk.corr_forward, ad.linear_operator(xc, geom, "forward"))
        h = ad.add(h, _apply_net(blk.dual, ad.concat_channels([h, p, y_node]), training))

        hc = ad.slice_channel(h, cfg.dual_project_channel)
        q = _apply_corr(blk.corr_adjoint, ad.linear_operator(hc, geom, "adjoint"))
        x = ad.add(x, _apply_net(blk.primal, ad.concat_channels([x, q]), training))

    return ad.slice_channel(x, 0)


def reconstruct(params: NetworkParams, y: np.ndarray,
                geom: ProjectorGeometry) -> np.ndarray:
    """Eval-mode reconstruction of a (T, V, B) series or (N, T, V, B) batch."""
    y = np.asarray(y)
    single = y.ndim == 3
    with ad.no_grad():
        out = forward(params, y[None] if single else y, geom, training=False)
    img = out.value[:, 0]
    return img[0] if single else img


CHECKPOINT_VERSION = 1


def save_params(params: NetworkParams, path) -> None:
    """Checkpoint directory: one .stp per array plus a JSON manifest."""
    os.makedirs(path, exist_ok=True)
    arrays = params.named_arrays()
    tensors = {}
    for name, arr in arrays.items():
        fname = name.replace(".", "_") + ".stp"
        tensorio.write_tensor(np.asarray(arr), os.path.join(path, fname))
        tensors[name] = fname
    bn_init = {f"block{k:02d}.{net}{i}": layer.bn.initialized
               for k, blk in enumerate(params.blocks)
               for net, layers in (("dual", blk.dual), ("primal", blk.primal))
               for i, layer in enumerate(layers) if layer.bn is not None}
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "tensors": tensors,
        "bn_initialized": bn_init,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_params(path) -> NetworkParams:
    """Load a checkpoint; the manifest must list exactly the tensors its
    config implies, otherwise the checkpoint is rejected."""
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
    except OSError as e:
        raise IncompatibleCheckpointError(f"cannot read checkpoint manifest: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError("incompatible checkpoint: unknown format version")
    try:
        cfg = NetworkConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as e:
        raise IncompatibleCheckpointError(f"incompatible checkpoint: bad config ({e})") from e

    params = init_network(cfg, seed=0)
    expected = params.named_arrays()
    listed = manifest.get("tensors", {})
    if set(listed) != set(expected):
        raise IncompatibleCheckpointError(
            "incompatible checkpoint: tensor inventory does not match config")

    loaded = {}
    for name, fname in listed.items():
        arr = tensorio.read_tensor(os.path.join(path, fname))
        if arr.shape != expected[name].shape:
            raise IncompatibleCheckpointError(
                f"incompatible checkpoint: shape mismatch for {name}")
        loaded[name] = arr

    bn_init = manifest.get("bn_initialized", {})
    for k, blk in enumerate(params.blocks):
        for net_name, layers in (("dual", blk.dual), ("primal", blk.primal)):
            for i, layer in enumerate(layers):
                base = f"block{k:02d}.{net_name}{i}"
                layer.weight.value = loaded[f"{base}.weight"]
                layer.bias.value = loaded[f"{base}.bias"]
                if layer.bn is not None:
                    layer.bn.gamma.value = loaded[f"{base}.bn.gamma"]
                    layer.bn.beta.value = loaded[f"{base}.bn.beta"]
                    layer.bn.running_mean = loaded[f"{base}.bn.running_mean"]
                    layer.bn.running_var = loaded[f"{base}.bn.running_var"]
                    layer.bn.initialized = bool(bn_init.get(base, False))
        for corr_name, corr in (("corr_fwd", blk.corr_forward),
                                ("corr_adj", blk.corr_adjoint)):
            if corr is not None:
                corr.weight.value = loaded[f"block{k:02d}.{corr_name}.weight"]
                corr.bias.value = loaded[f"block{k:02d}.{corr_name}.bias"]
    return params
