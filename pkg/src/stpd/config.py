"""Experiment configuration: TOML over full-scale defaults.

Sections: [geometry], [phantom], [scan], [schedule], [network], [train],
[kemst]. Every key is optional and defaults to the published experiment
values (160x128 sinograms, 128x128 images, 18-frame hour-long schedule,
10 iteration blocks, 3 primal/dual channels, lr 8e-4 decaying by 0.99,
batch size 2, 20 EM iterations, temporal window 15). Unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import kinetics, simulate
from .network import NetworkConfig
from .projector import ProjectorGeometry
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KemstConfig:
    k_neighbors: int = 48
    window: int = 15
    neighborhood: int = 9
    composites: int = 3
    composite_iters: int = 20
    iters: int = 20


@dataclass(frozen=True)
class ScanConfig:
    first_frame_counts: float = 5000.0
    last_frame_counts: float = 20000.0
    background_fraction: float = 0.0


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int | None = None  # defaults to the geometry image size
    jitter: bool = True
    regions: tuple[simulate.EllipseRegion, ...] | None = None


@dataclass
class ExperimentConfig:
    geometry: ProjectorGeometry = field(default_factory=lambda: ProjectorGeometry(160, 128, 128))
    schedule: simulate.FrameSchedule = field(default_factory=simulate.FrameSchedule.default)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kemst: KemstConfig = field(default_factory=KemstConfig)

    def phantom_spec(self, seed: int) -> simulate.PhantomSpec:
        size = self.phantom.image_size or self.geometry.image_size
        if self.phantom.regions is not None:
            return simulate.PhantomSpec(size, self.phantom.regions, seed)
        return simulate.default_phantom_spec(size, seed, jitter=self.phantom.jitter)

    def scan_model(self) -> simulate.ScanModel:
        return simulate.ScanModel(
            simulate.default_frame_targets(self.schedule,
                                           self.scan.first_frame_counts,
                                           self.scan.last_frame_counts),
            self.scan.background_fraction,
        )


def _check_keys(section: str, d: dict, allowed) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _kinetics_from(section: str, d: dict) -> kinetics.KineticParams:
    _check_keys(section, d, {"K1", "k2", "k3", "k4",
                             "a1", "a2", "a3", "l1", "l2", "l3"})
    plasma_keys = {k: d[k] for k in ("a1", "a2", "a3", "l1", "l2", "l3") if k in d}
    plasma = kinetics.FengInput(**plasma_keys) if plasma_keys else kinetics.FengInput()
    try:
        return kinetics.KineticParams(
            K1=float(d.get("K1", 0.0)), k2=float(d.get("k2", 0.0)),
            k3=float(d.get("k3", 0.0)), k4=float(d.get("k4", 0.0)),
            plasma=plasma)
    except ValueError as e:
        raise ConfigError(f"[{section}]: {e}") from e


def _region_from(idx: int, d: dict) -> simulate.EllipseRegion:
    section = f"phantom.regions[{idx}]"
    _check_keys(section, d, {"name", "center", "radii", "angle_deg", "kinetics"})
    for key in ("name", "center", "radii"):
        if key not in d:
            raise ConfigError(f"[{section}] missing required key {key!r}")
    return simulate.EllipseRegion(
        name=str(d["name"]),
        center=tuple(float(v) for v in d["center"]),
        radii=tuple(float(v) for v in d["radii"]),
        angle_deg=float(d.get("angle_deg", 0.0)),
        kinetics=_kinetics_from(f"{section}.kinetics", d.get("kinetics", {})),
    )


def parse_config(doc: dict) -> ExperimentConfig:
    _check_keys("<root>", doc, {"geometry", "phantom", "scan", "schedule",
                                "network", "train", "kemst"})
    cfg = ExperimentConfig()
    try:
        geo = doc.get("geometry", {})
        _check_keys("geometry", geo, {"n_views", "n_bins", "image_size",
                                      "pixel_size", "bin_spacing", "fov_radius"})
        cfg.geometry = ProjectorGeometry(
            n_views=int(geo.get("n_views", 160)),
            n_bins=int(geo.get("n_bins", 128)),
            image_size=int(geo.get("image_size", 128)),
            pixel_size=float(geo.get("pixel_size", 1.0)),
            bin_spacing=float(geo.get("bin_spacing", 1.0)),
            fov_radius=float(geo["fov_radius"]) if "fov_radius" in geo else None,
        )

        sch = doc.get("schedule", {})
        _check_keys("schedule", sch, {"durations"})
        if "durations" in sch:
            cfg.schedule = simulate.FrameSchedule.from_durations(
                [float(d) for d in sch["durations"]])

        ph = doc.get("phantom", {})
        _check_keys("phantom", ph, {"image_size", "jitter", "regions"})
        regions = None
        if "regions" in ph:
            regions = tuple(_region_from(i, r) for i, r in enumerate(ph["regions"]))
        cfg.phantom = PhantomConfig(
            image_size=int(ph["image_size"]) if "image_size" in ph else None,
            jitter=bool(ph.get("jitter", True)),
            regions=regions,
        )

        sc = doc.get("scan", {})
        _check_keys("scan", sc, {"first_frame_counts", "last_frame_counts",
                                 "background_fraction"})
        cfg.scan = ScanConfig(
            first_frame_counts=float(sc.get("first_frame_counts", 5000.0)),
            last_frame_counts=float(sc.get("last_frame_counts", 20000.0)),
            background_fraction=float(sc.get("background_fraction", 0.0)),
        )

        nw = doc.get("network", {})
        _check_keys("network", nw, {"n_blocks", "n_primal", "n_dual",
                                    "hidden_channels", "conv_depth",
                                    "temporal_extent", "correction_convs",
                                    "primal_project_channel", "dual_project_channel"})
        cfg.network = NetworkConfig(**{k: v for k, v in nw.items()})

        tr = doc.get("train", {})
        _check_keys("train", tr, {"epochs", "batch_size", "base_lr",
                                  "lr_decay", "seed", "checkpoint_every"})
        cfg.train = TrainConfig(
            epochs=int(tr.get("epochs", 200)),
            batch_size=int(tr.get("batch_size", 2)),
            base_lr=float(tr.get("base_lr", 8e-4)),
            lr_decay=float(tr.get("lr_decay", 0.99)),
            seed=int(tr.get("seed", 0)),
            checkpoint_every=int(tr.get("checkpoint_every", 10)),
            network=cfg.network,
        )

        ke = doc.get("kemst", {})
        _check_keys("kemst", ke, {"k_neighbors", "window", "neighborhood",
                                  "composites", "composite_iters", "iters"})
        cfg.kemst = KemstConfig(
            k_neighbors=int(ke.get("k_neighbors", 48)),
            window=int(ke.get("window", 15)),
            neighborhood=int(ke.get("neighborhood", 9)),
            composites=int(ke.get("composites", 3)),
            composite_iters=int(ke.get("composite_iters", 20)),
            iters=int(ke.get("iters", 20)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e
    return parse_config(doc)
