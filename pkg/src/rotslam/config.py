"""Flat ``key = value`` run configuration with typed, range-checked keys."""
from __future__ import annotations

import math
from pathlib import Path

from .errors import ConfigError, FormatError


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _frac(v):
    return 0.0 <= v <= 1.0


# key: (default, type, validator, help)
SCHEMA = {
    "camera.fx": (500.0, float, _pos, "focal length x (pixels)"),
    "camera.fy": (500.0, float, _pos, "focal length y (pixels)"),
    "camera.cx": (320.0, float, _nonneg, "principal point x (pixels)"),
    "camera.cy": (240.0, float, _nonneg, "principal point y (pixels)"),
    "correspond.grid_rows": (8, int, _pos, "grid rows for region scoring"),
    "correspond.grid_cols": (8, int, _pos, "grid columns for region scoring"),
    "correspond.image_w": (640.0, float, _pos, "image width when no file header gives it"),
    "correspond.image_h": (480.0, float, _pos, "image height when no file header gives it"),
    "relrot.independence_tol": (1e-6, float, _nonneg, "triple-product gate for rotation-only hypotheses"),
    "relrot.explain_ratio": (1e-8, float, _nonneg, "epipolar/rotation-only cost ratio that prefers the epipolar model"),
    "rotavg.irls_tol": (1e-6, float, _pos, "IRLS stop: max per-vertex update (rad)"),
    "rotavg.irls_max_iters": (100, int, _pos, "IRLS iteration cap"),
    "rotavg.l1_max_iters": (5, int, _nonneg, "l1 initialization sweeps"),
    "rotavg.weight_floor": (1e-5, float, _pos, "IRLS residual floor (rad)"),
    "rotavg.alpha_cap_deg": (45.0, float, _pos, "cap on the pruning threshold (deg)"),
    "rotavg.prune_rounds": (3, int, _nonneg, "maximum pruning rounds (0 disables pruning)"),
    "transavg.beta": (1.0, float, _pos, "ADMM penalty, relative to the mean residual"),
    "transavg.primal_tol": (1e-8, float, _pos, "ADMM stop: max |A x - e|"),
    "transavg.dual_tol": (1e-8, float, _pos, "ADMM stop: max |x_k+1 - x_k|"),
    "transavg.max_iters": (2000, int, _pos, "ADMM iteration cap"),
    "transavg.polish": (True, bool, None, "try certified stationary points when the sign pattern settles"),
    "backend.keyframe_interval": (30, int, _pos, "frames between keyframes"),
    "backend.window_overlap": (2, int, _nonneg, "published frames re-solved to anchor each window"),
    "backend.frame_dt": (0.1, float, _pos, "seconds per frame when inputs carry no timestamps"),
    "backend.loop_dist_frac": (0.01, float, _nonneg, "loop distance threshold as a fraction of trajectory extent"),
    "backend.loop_inlier_thresh": (50, int, _nonneg, "minimum correspondences for a loop"),
    "backend.loop_exclusion_intervals": (3, int, _nonneg, "recent keyframe intervals excluded from loop search"),
    "backend.loop_weight": (10.0, float, _pos, "weight of the loop edge in closure"),
    "backend.max_step_disagreement": (0.1, float, _pos, "median step-direction misfit (rad) above which a window falls back to dead reckoning"),
    "backend.refine_rotations": (False, bool, None, "re-run rotation averaging over a closed loop"),
    "output.format": ("tum", str, lambda v: v in ("tum", "kitti"), "trajectory format: tum or kitti"),
    "simulate.shape": ("circle", str, lambda v: v in ("line", "circle", "square-loop", "random-walk"),
                       "line, circle, square-loop or random-walk"),
    "simulate.level": ("backend", str, lambda v: v in ("backend", "frontend"),
                       "backend (pose graph) or frontend (correspondences)"),
    "simulate.frames": (120, int, lambda v: v >= 2, "number of frames"),
    "simulate.points": (600, int, _nonneg, "number of 3D points"),
    "simulate.size": (10.0, float, _pos, "trajectory size (world units)"),
    "simulate.covis_span": (3, int, _pos, "frames ahead each frame is matched with"),
    "simulate.rotation_noise_deg": (0.0, float, _nonneg, "mean relative rotation noise (deg)"),
    "simulate.direction_noise_deg": (0.0, float, _nonneg, "mean direction noise (deg)"),
    "simulate.bearing_noise_deg": (0.0, float, _nonneg, "mean bearing noise (deg)"),
    "simulate.outlier_fraction": (0.0, float, _frac, "fraction of corrupted edges or matches"),
    "simulate.loop_radius": (0.0, float, _nonneg, "emit loop edges between distant frames closer than this"),
    "simulate.seed": (0, int, _nonneg, "random seed"),
}


def _parse_value(key, text):
    default, typ, check, _ = SCHEMA[key]
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            val = low in ("true", "1", "yes")
        elif typ is int:
            val = int(text)
        elif typ is float:
            val = float(text)
            if not math.isfinite(val):
                raise ValueError(text)
        else:
            val = text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    if check is not None and not check(val):
        raise ConfigError(f"{key}: value {val!r} out of range ({SCHEMA[key][3]})")
    return val


class RunConfig:
    """Effective configuration: defaults overlaid by a file and overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {k: v[0] for k, v in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v if isinstance(v, str) else _render(v))

    def set(self, key: str, text: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _parse_value(key, text)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            with open(path, encoding="utf-8") as fh:
                for no, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise FormatError(path, no, "expected 'key = value'")
                    key, val = (s.strip() for s in line.split("=", 1))
                    try:
                        cfg.set(key, val)
                    except ConfigError as exc:
                        raise FormatError(path, no, str(exc)) from None
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, val = (s.strip() for s in item.split("=", 1))
            cfg.set(key, val)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values))


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def describe_keys() -> str:
    width = max(len(k) for k in SCHEMA)
    return "\n".join(f"  {k:<{width}}  default {_render(v[0]):<8}  {v[3]}"
                     for k, v in sorted(SCHEMA.items()))
