"""Training configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


def _coarse_lrs() -> dict:
    # 4D-GS style rates, rescaled for a unit-sized scene and a few thousand steps
    return {
        "positions": 1.6e-3,
        "rotations": 1e-3,
        "scales": 5e-3,
        "opacity": 5e-2,
        "sh": 2.5e-3,
        "hex": 1.6e-3,
        "deform": 1.6e-4,
        "color": 1.6e-4,
    }


@dataclass
class TrainConfig:
    coarse_iters: int = 3000
    static_iters: int = 0
    refine_iters: int = 5000
    lrs: dict = field(default_factory=_coarse_lrs)
    lr_final_ratio: float = 0.1
    refine_lr: float = 1e-4
    refine_final_ratio: float = 0.1
    refine_color_head: bool = True
    multiscale: bool = True
    r_min: float = 0.25
    r_max: float = 1.0
    ssim_weight: float = 0.2
    color_reg: float = 0.5
    lambda_perceptual: float = 0.5
    half_period_weight: bool = False
    densify: bool = True
    densify_grad: float = 2e-4
    densify_from: int = 300
    densify_until: int = 2000
    densify_interval: int = 100
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    max_gaussians: int = 20000
    n_init_points: int = 1500
    sh_degree: int = 1
    color_head: bool = True
    eval_every: int = 250
    eval_frames: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.r_min <= self.r_max <= 1:
            raise ValueError(f"need 0 < r_min <= r_max <= 1, got [{self.r_min}, {self.r_max}]")
        if self.lambda_perceptual < 0:
            raise ValueError("lambda_perceptual must be non-negative")
        for name in ("coarse_iters", "static_iters", "refine_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ssim_weight < 0:
            raise ValueError("ssim_weight must be non-negative")
        if self.color_reg < 0:
            raise ValueError("color_reg must be non-negative")
        merged = _coarse_lrs()
        unknown = set(self.lrs) - set(merged)
        if unknown:
            raise ValueError(f"unknown learning-rate groups: {sorted(unknown)}")
        merged.update(self.lrs)
        self.lrs = merged

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
