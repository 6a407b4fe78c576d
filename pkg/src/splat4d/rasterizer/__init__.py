"""CPU splatting rasterizer with hand-written adjoints."""
from .core import (
    COV2D_FLOOR,
    Projection,
    RenderOutput,
    RenderSettings,
    project_backward,
    project_gaussians,
    render,
    render_backward,
)
from .io import read_raw, write_png, write_raw

__all__ = [
    "COV2D_FLOOR", "Projection", "RenderOutput", "RenderSettings", "project_backward",
    "project_gaussians", "render", "render_backward", "read_raw", "write_png", "write_raw",
]
