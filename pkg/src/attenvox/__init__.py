"""Time-resolved attenuation voxel grids reconstructed from sparse cone-beam projections."""

from .geometry import SceneBounds, ViewPose, ray_bundle, generate_rays, pose_to_camera
from .grid import Grid4D, init_grid, query_density, upscale_spatial, upscale_temporal, refresh_occupancy
from .renderer import RenderConfig, render_rays, render_view, export_volume
from .trainer import TrainConfig, run_schedule
from .phantom import default_phantom, project_phantom, rasterize_ground_truth, add_noise, NoiseModel
from .metrics import psnr, ssim, evaluate_views, evaluate_volumes

__version__ = "0.1.0"
