from vibe.sim.lidar import lidar_scan
from vibe.sim.scene import Element, Entry, Exit, SceneLayout, load_scene, loads_scene, dumps_scene, save_scene
from vibe.sim.world import (
    AGENT_COLLISION,
    NONE,
    STATIC_COLLISION,
    AgentState,
    Episode,
    ExpertReplayPolicy,
    Observation,
    ReplayData,
    SimConfig,
    Simulator,
    Transition,
    detect_collision,
    init_episode,
    rollout,
    step,
)
