"""Video-to-behaviour pipeline: calibration, 3D tracking, replay simulation and imitation learning."""

__version__ = "0.1.0"

CLASSES = ("car", "bus", "truck", "pedestrian", "bicycle")
FRAME_RATE = 15.0
