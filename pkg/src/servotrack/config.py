"""YAML configuration: world, cameras, filter, HOG and servo sections.

Chain and scene files are YAML too; relative paths resolve against the file
that mentions them. Angles in chain files are radians unless the file sets
``angles: deg``. Transforms are written as ``{translation: [...], rotvec: [...]}``
(``rotvec_deg`` for degrees).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .camera import CameraModel, Intrinsics
from .filter import FilterConfig, NoiseParams
from .hog import HOGParams
from .kinematics import DHChain, DHLink, Transform, rotvec_to_matrix
from .mesh import load_mesh
from .renderer import Scene, ScenePart
from .servo import ServoConfig
from .sim import ClutterConfig, EncoderBias, WorldConfig


class ConfigError(ValueError):
    pass


def assets_dir() -> Path:
    return Path(str(resources.files("servotrack") / "assets"))


DEFAULT_CONFIG = "default.yaml"


def _read(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def parse_transform(spec: dict | None) -> Transform:
    if spec is None:
        return Transform.identity()
    unknown = set(spec) - {"translation", "rotvec", "rotvec_deg"}
    if unknown:
        raise ConfigError(f"unknown transform keys: {sorted(unknown)}")
    t = np.asarray(spec.get("translation", [0.0, 0.0, 0.0]), dtype=float)
    if "rotvec_deg" in spec:
        o = np.radians(np.asarray(spec["rotvec_deg"], dtype=float))
    else:
        o = np.asarray(spec.get("rotvec", [0.0, 0.0, 0.0]), dtype=float)
    return Transform(rotvec_to_matrix(o), t)


def parse_chain(data: dict) -> DHChain:
    scale = np.pi / 180 if data.get("angles", "rad") == "deg" else 1.0
    links = []
    for i, spec in enumerate(data.get("links", [])):
        try:
            links.append(DHLink(
                a=float(spec.get("a", 0.0)),
                alpha=float(spec.get("alpha", 0.0)) * scale,
                d=float(spec.get("d", 0.0)),
                theta_offset=float(spec.get("theta_offset", 0.0)) * scale,
                joint_kind=spec.get("joint", "revolute"),
            ))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"link {i}: {exc}") from None
    if not links:
        raise ConfigError("chain has no links")
    return DHChain(tuple(links), parse_transform(data.get("base")))


def load_chain(path) -> DHChain:
    return parse_chain(_read(path))


def parse_scene(data: dict, root: Path) -> Scene:
    parts = []
    for name, spec in (data.get("parts") or {}).items():
        mesh = load_mesh(root / spec["mesh"])
        parts.append(ScenePart(name, mesh, parse_transform(spec.get("offset")), float(spec.get("albedo", 1.0))))
    kwargs = {}
    if "light_dir" in data:
        kwargs["light_dir"] = np.asarray(data["light_dir"], dtype=float)
    if "ambient" in data:
        kwargs["ambient"] = float(data["ambient"])
    return Scene(tuple(parts), **kwargs)


def load_scene(path) -> Scene:
    path = Path(path)
    return parse_scene(_read(path), path.parent)


def _chain_ref(ref, root: Path) -> DHChain:
    return parse_chain(ref) if isinstance(ref, dict) else load_chain(root / ref)


def parse_camera(spec: dict, root: Path, head: DHChain | None, head_q) -> CameraModel:
    intr = Intrinsics(**{k: spec["intrinsics"][k] for k in ("fx", "fy", "cx", "cy", "width", "height")})
    if "extrinsic" in spec:
        return CameraModel(spec["name"], intr, fixed_extrinsic=parse_transform(spec["extrinsic"]))
    chain = _chain_ref(spec["chain"], root) if "chain" in spec else head
    if chain is None:
        raise ConfigError(f"camera {spec['name']!r} needs an extrinsic or a mount chain")
    q = np.asarray(spec.get("q", head_q), dtype=float)
    return CameraModel(spec["name"], intr, chain=chain, q=chain.check(q), mount=parse_transform(spec.get("mount")))


@dataclass(frozen=True, eq=False)
class Config:
    world: WorldConfig
    filter: FilterConfig
    servo: ServoConfig
    scenarios: dict = field(default_factory=dict)

    @property
    def hog(self) -> HOGParams:
        return self.filter.hog

    @property
    def cameras(self):
        return self.world.cameras


def _section(data: dict, name: str) -> dict:
    sec = data.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def parse_config(data: dict, root: Path) -> Config:
    w = _section(data, "world")
    arm = _chain_ref(w["arm"], root)
    home = arm.check(np.asarray(w["home_q"], dtype=float))
    bias_spec = w.get("bias") or {}
    offsets = np.radians(np.asarray(bias_spec.get("offsets_deg", [0.0] * arm.n_joints), dtype=float))
    drift = np.radians(np.asarray(bias_spec.get("drift_deg_per_s", [0.0] * arm.n_joints), dtype=float))
    bias = EncoderBias(arm.check(offsets), arm.check(drift))

    head = _chain_ref(w["head"], root) if "head" in w else None
    head_q = w.get("head_q")
    cameras = tuple(parse_camera(c, root, head, head_q) for c in data.get("cameras", []))
    if len(cameras) < 2:
        raise ConfigError("need a left and a right camera")
    scene = load_scene(root / w["scene"]) if isinstance(w["scene"], str) else parse_scene(w["scene"], root)

    c = w.get("clutter") or {}
    clutter = ClutterConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
    servo_sec = dict(_section(data, "servo"))
    goal = np.asarray(servo_sec.pop("goal", [125.0, 89.0, 135.0]), dtype=float)
    world = WorldConfig(
        arm=arm, home_q=home, bias=bias, cameras=cameras, scene=scene, goal=goal,
        pixel_noise=float(w.get("pixel_noise", 0.0)), clutter=clutter,
        coarse_target_sigma=float(w.get("coarse_target_sigma", 0.01)),
        start_radius=float(w.get("start_radius", 0.03)),
    )

    hog = _section(data, "hog")
    hog_params = HOGParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in hog.items()})
    f = dict(_section(data, "filter"))
    noise = NoiseParams(**(f.pop("noise", None) or {}))
    if f.get("sigma_lik") == "auto":
        f["sigma_lik"] = None
    fcfg = FilterConfig(noise=noise, hog=hog_params, **f)
    return Config(world, fcfg, ServoConfig(**servo_sec), _section(data, "scenarios"))


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Load ``path`` (the packaged default when None), with optional section overrides."""
    path = Path(path) if path is not None else assets_dir() / DEFAULT_CONFIG
    data = _read(path)
    for section, values in (overrides or {}).items():
        data.setdefault(section, {})
        data[section] = {**data[section], **values}
    try:
        return parse_config(data, path.parent)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def with_filter(cfg: Config, **changes) -> Config:
    return replace(cfg, filter=replace(cfg.filter, **changes))


def with_servo(cfg: Config, **changes) -> Config:
    return replace(cfg, servo=replace(cfg.servo, **changes))
