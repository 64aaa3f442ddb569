"""Pydantic models for run configuration and reports."""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class OptimizerConfig(BaseModel):
    """Map optimization settings."""

    alpha: float = Field(default=1000.0, ge=100.0, le=1000.0, description="Depth-distortion weight")
    beta: float = Field(default=0.05, ge=0.0, description="Depth-normal consistency weight")
    lambda_dssim: float = Field(default=0.2, ge=0.0, le=1.0, description="D-SSIM mix in the color loss")
    use_distortion: bool = Field(default=True, description="Enable the depth-distortion term")
    use_normal_consistency: bool = Field(default=True, description="Enable the depth-normal term")

    lr_mean: float = Field(default=1.6e-4, gt=0, description="Mean learning rate, multiplied by scene extent")
    lr_rotation: float = Field(default=1e-3, gt=0)
    lr_scale: float = Field(default=5e-3, gt=0, description="Learning rate of log-scales")
    lr_opacity: float = Field(default=5e-2, gt=0, description="Learning rate of opacity logits")
    lr_color: float = Field(default=2.5e-3, gt=0)

    iterations_per_keyframe: int = Field(default=100, ge=0)
    window_recent: int = Field(default=8, ge=1, description="Most recent keyframes per mapping window")
    window_random: int = Field(default=2, ge=0, description="Random past keyframes per mapping window")

    densify_interval: int = Field(default=100, ge=1)
    densify_grad_threshold: float = Field(default=2e-4, gt=0)
    prune_opacity: float = Field(default=0.005, ge=0.0, le=1.0)
    split_scale_fraction: float = Field(default=0.01, gt=0, description="Max scale / extent above which a Gaussian is split instead of cloned")
    max_gaussians: int = Field(default=5000, ge=1)
    densify: bool = Field(default=True, description="Run densify/prune every densify_interval iterations")

    depth_weight: float = Field(default=0.5, ge=0.0, description="Weight of the sensor-depth L1 term (rgbd mode)")
    seed_opacity: float = Field(default=0.1, gt=0.0, lt=1.0)
    seed_min_scale: float = Field(default=1e-4, gt=0)
    history_window: int = Field(default=50, ge=1, description="Iterations per window when checking that the mean map loss keeps falling")


class TrackingConfig(BaseModel):
    """Pose estimation, keyframing and loop-closure settings."""

    huber_delta: float = Field(default=2.447, gt=0, description="Huber threshold on the whitened residual norm")
    min_observations: int = Field(default=6, ge=3)
    lm_max_iterations: int = Field(default=100, ge=1)
    lm_step_tolerance: float = Field(default=1e-8, gt=0)
    ba_max_iterations: int = Field(default=50, ge=1)
    ba_relative_tolerance: float = Field(default=1e-10, gt=0)
    ba_every_n_keyframes: int = Field(default=5, ge=0, description="Run global BA every n keyframes (0 disables)")
    depth_sigma: float = Field(default=0.01, gt=0, description="Depth residual standard deviation in meters (rgbd)")

    keyframe_overlap: float = Field(default=0.9, gt=0.0, le=1.0)
    keyframe_translation: float = Field(default=0.05, gt=0.0, description="Fraction of scene extent")
    min_parallax_deg: float = Field(default=1.0, ge=0.0)

    loop_min_gap: int = Field(default=50, ge=1)
    loop_overlap: float = Field(default=0.3, gt=0.0, le=1.0)

    drift_translation: Tuple[float, float, float] = Field(
        default=(0.0, 0.0, 0.0), description="Injected drift per keyframe (meters, world)"
    )
    drift_yaw_deg: float = Field(default=0.0, description="Injected yaw drift per keyframe")
    drift_scale: float = Field(default=1.0, gt=0.0, description="Injected scale drift per keyframe (mono)")


class FrontendConfig(BaseModel):
    """Synthetic correspondence provider settings."""

    pixel_noise: float = Field(default=0.0, ge=0.0, description="Observation noise std in pixels")
    outlier_ratio: float = Field(default=0.0, ge=0.0, lt=1.0)
    outlier_magnitude: float = Field(default=50.0, gt=0.0, description="Outlier displacement in pixels")
    relabel_gap: int = Field(default=10, ge=1, description="Frames unseen before a landmark gets a fresh track id")
    n_landmarks: int = Field(default=400, ge=8)


class ExtractionConfig(BaseModel):
    """Surface extraction settings."""

    tau: float = Field(default=0.5, gt=0.0, lt=1.0, description="Opacity level set")
    iterations: int = Field(default=8, ge=0, description="Binary-search iterations")
    edge_filter: Literal["extent", "raw"] = Field(default="extent", description="Use 3-sigma or raw max scales in the edge filter")
    binary_ply: bool = Field(default=True)


class RunConfig(BaseSettings):
    """Top level run configuration."""

    model_config = SettingsConfigDict(env_prefix="FGO_", env_nested_delimiter="__")

    mode: Literal["mono", "rgbd"] = Field(default="rgbd")
    width: int = Field(default=64, ge=1)
    height: int = Field(default=64, ge=1)
    seed: int = Field(default=0)
    workers: Literal["sequential", "threaded"] = Field(default="sequential")
    eval_every: int = Field(default=5, ge=1, description="Evaluate every n-th frame")
    association_tolerance: float = Field(default=0.02, ge=0.0, description="TUM timestamp association tolerance in seconds")
    depth_scale: float = Field(default=5000.0, gt=0.0, description="Raw depth units per meter")

    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    extraction: ExtractionConfig = Field(default_factory=ExtractionConfig)

    sentry_dsn: Optional[str] = Field(None, description="Sentry DSN for error tracking")
    log_level: str = Field(default="INFO", description="Logging level")


class FrameMetrics(BaseModel):
    """Per-frame row of the metrics report."""

    frame: int
    timestamp: float
    keyframe: bool
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    depth_l1_m: Optional[float] = None
    tracking_s: float = 0.0
    mapping_s: float = 0.0


class MetricsReport(BaseModel):
    """Machine-readable summary of a run."""

    ate_rmse_m: float
    ate_rmse_before_loop_m: Optional[float] = None
    psnr_db: Optional[float] = Field(default=None, description="Mean PSNR over evaluated frames; None when no frame was evaluated")
    ssim: Optional[float] = Field(default=None, description="Mean SSIM over evaluated frames; None when no frame was evaluated")
    depth_l1_m: Optional[float] = None
    n_gaussians: int
    n_keyframes: int
    n_loops: int = 0
    n_mesh_vertices: int = 0
    n_mesh_triangles: int = 0
    wall_time_tracking_s: float = 0.0
    wall_time_mapping_s: float = 0.0
    wall_time_extraction_s: float = 0.0
    extra: Dict[str, float] = Field(default_factory=dict)

    def image_summary(self) -> str:
        if self.psnr_db is None or self.ssim is None:
            return "no frames evaluated"
        return f"PSNR {self.psnr_db:.2f} dB, SSIM {self.ssim:.3f}"

    def deterministic_view(self) -> Dict[str, object]:
        """Report contents without wall-clock timings."""
        return {k: v for k, v in self.model_dump().items() if not k.startswith("wall_time_")}


class RunArtifacts(BaseModel):
    """Files written by a pipeline run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    trajectory: str
    checkpoint: str
    mesh: str
    metrics: str
    frames_csv: str
    renders: List[str] = Field(default_factory=list)
    report: MetricsReport
