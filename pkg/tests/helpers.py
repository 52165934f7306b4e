"""Shared scenario builders for the test suite."""
from dataclasses import replace

from rsucoop.scenario import ScenarioConfig, VehicleConfig


def short_config(sensor: str = "VLP16", duration: float = 8.0, start: float = 95.0, **kw) -> ScenarioConfig:
    """The default world, but the run starts near the RSU and lasts a few seconds."""
    cfg = ScenarioConfig().with_sensor(sensor)
    cfg = replace(cfg, vehicle=replace(VehicleConfig(), start_offset=start), duration=duration, **kw)
    return cfg.validate()


def noise_free(cfg: ScenarioConfig) -> ScenarioConfig:
    return replace(
        cfg,
        ndt=replace(cfg.ndt, base_sigma_xy=0.0, base_sigma_yaw=0.0),
        rsus=tuple(replace(r, range_noise_sigma=0.0) for r in cfg.rsus),
    ).validate()
