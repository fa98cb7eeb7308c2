"""File formats and synthetic scene generation."""
from .formats import (
    DEPTH_SCALE,
    PLY_PROPERTIES,
    ParseError,
    camera_from_dict,
    camera_to_dict,
    loss_weights_from_dict,
    loss_weights_to_dict,
    ply_bytes,
    read_checkpoint,
    read_config,
    read_depth_png,
    read_depth_png_raw,
    read_latent,
    read_obj,
    read_ply,
    read_png,
    read_tensor,
    tensor_bytes,
    write_checkpoint,
    write_depth_png,
    write_latent,
    write_obj,
    write_ply,
    write_png,
    write_tensor,
)
from .synth import (
    SCENE_KINDS,
    SynthScene,
    View,
    orbit_cameras,
    proxy_mesh,
    render_views,
    surface_mesh,
    surface_points,
    synth_scene,
)

__all__ = [
    "DEPTH_SCALE", "PLY_PROPERTIES", "ParseError", "SCENE_KINDS", "SynthScene", "View",
    "camera_from_dict", "camera_to_dict", "loss_weights_from_dict", "loss_weights_to_dict",
    "orbit_cameras", "ply_bytes", "proxy_mesh", "read_checkpoint", "read_config",
    "read_depth_png", "read_depth_png_raw", "read_latent", "read_obj", "read_ply", "read_png",
    "read_tensor", "render_views", "surface_mesh", "surface_points", "synth_scene", "tensor_bytes",
    "write_checkpoint", "write_depth_png", "write_latent", "write_obj", "write_ply",
    "write_png", "write_tensor",
]
