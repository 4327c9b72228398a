from windsteer.turbwind.farm import (
    SECTORS, YAW_LIMIT, YAW_RATE, FarmLayout, FarmModel, FarmState, SectorSamples, WakePacket,
    WakeParams, apply_yaw_command, gaussian_deficit, sample_rotor_sectors, step_physics,
    turbine_power, with_yaw,
)
from windsteer.turbwind.turbulence import (
    BoxDims, InflowSpec, TurbulenceBox, box_filename, freestream_at, generate_turbulence_box,
    load_box, sample_fluctuation, save_box,
)

__all__ = [
    "SECTORS", "YAW_LIMIT", "YAW_RATE", "BoxDims", "FarmLayout", "FarmModel", "FarmState",
    "InflowSpec", "SectorSamples", "TurbulenceBox", "WakePacket", "WakeParams",
    "apply_yaw_command", "box_filename", "freestream_at", "gaussian_deficit",
    "generate_turbulence_box", "load_box", "sample_fluctuation", "sample_rotor_sectors",
    "save_box", "step_physics", "turbine_power", "with_yaw",
]
