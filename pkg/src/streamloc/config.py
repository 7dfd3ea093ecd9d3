"""Pipeline configuration.

All tunables of the online localizer and the predictors live in one
dataclass that serializes to YAML.  Every run copies it into the track
header so results can be reproduced.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml


@dataclass
class PipelineConfig:
    # temporal window (frames of history) and pose refinement iterations
    delta: int = 5
    Q: int = 3
    # appearance model
    K: int = 20
    rho_floor: float = 0.25  # px^2, floor on per-cluster flow variance
    # superpixels
    target_count: int = 200
    compactness: float = 10.0
    flow_bins: int = 8
    # pose model
    spline_lambda: float = 0.5
    pose_margin: float = 0.0
    # CRF
    alpha_fg: float = 1.0
    alpha_pose: float = -1.0
    beta: dict = field(default_factory=lambda: {
        "col": 1.0, "hof": 1.0, "mu": 1.0, "mb": 1.0, "edge": 1.0})
    unary_gain: float = 8.0
    unary_center: float | None = None  # None: midpoint of inside/outside pose-box scores
    temporal_overlap: float = 0.2
    max_segment_fraction: float = 0.5  # larger segment boxes are treated as failures
    # state transition std-devs for (cx, cy, w, h), pixels
    transition_sigma: tuple = (12.0, 12.0, 8.0, 8.0)
    # prediction
    mode: str = "s_svm"
    M: int = 3
    omega: int = 0  # 0 -> taken from the trained models
    C: float = 1.0
    epsilon: float = 0.5
    V: int = 64
    dp_kernel: str = "histogram_intersection"
    dp_reset_floor: float = 0.01
    dp_reset_patience: int = 3
    psi_variant: str = "sign"
    ssvm_max_rounds: int = 100
    ssvm_tol: float = 1e-4
    svm_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.transition_sigma = tuple(float(s) for s in self.transition_sigma)
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        for name in ("Q",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("K", "target_count", "M", "V", "flow_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("C", "epsilon", "compactness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.mode not in ("dp_svm", "s_svm"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.dp_kernel not in ("linear", "histogram_intersection"):
            raise ValueError(f"unknown kernel {self.dp_kernel!r}")
        if self.psi_variant not in ("sign", "scaled"):
            raise ValueError(f"unknown psi variant {self.psi_variant!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transition_sigma"] = list(self.transition_sigma)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))
