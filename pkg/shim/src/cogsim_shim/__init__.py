"""Gym-style episode adapter over the simulation service's HTTP API.

Presents the canonical ``reset(seed) -> (obs, info)`` /
``step(action) -> (obs, reward, terminated, truncated, info)`` protocol so
external agents can train against the engine without linking it. One adapter
instance owns one server-side session; vectorized training uses N instances.
"""

from .env import (
    ActionSpace,
    EpisodeDoneError,
    ObservationSpace,
    RemoteEnv,
    ServiceError,
    ShimEnvSpec,
)

__all__ = [
    "ActionSpace",
    "EpisodeDoneError",
    "ObservationSpace",
    "RemoteEnv",
    "ServiceError",
    "ShimEnvSpec",
]

__version__ = "0.1.0"
