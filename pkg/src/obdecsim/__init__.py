"""Decentralised multi-UAV target search with local POMDP planning and observation sharing."""

from .belief import Belief, BeliefConfig, LocalObservation, init_belief, update
from .comms import Channel, ChannelConfig, Inbox, SharedMessage, encode, integrate
from .dynamics import Action, DynamicsParams, PoseNoise, UavState, step_kinematics
from .mission import MissionConfig, MissionResult, Strategy, assign_zones, run_mission
from .planner import Planner, PlannerConfig
from .world import World, load_scenario

__version__ = "0.1.0"

__all__ = [
    "Action", "Belief", "BeliefConfig", "Channel", "ChannelConfig", "DynamicsParams", "Inbox",
    "LocalObservation", "MissionConfig", "MissionResult", "Planner", "PlannerConfig",
    "PoseNoise", "SharedMessage", "Strategy", "UavState", "World", "assign_zones", "encode",
    "init_belief", "integrate", "load_scenario", "run_mission", "step_kinematics", "update",
]
