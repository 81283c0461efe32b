"""Remote environment client speaking the documented wire protocol."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import requests

DEFAULT_URL_ENV_VAR = "COGSIM_SERVICE_URL"


class ServiceError(RuntimeError):
    """The service replied with a declared error payload."""

    def __init__(self, code: str, message: str, status: int):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.status = status


class EpisodeDoneError(ServiceError):
    """Raised when stepping an episode that has already ended."""


@dataclass(frozen=True)
class ObservationSpace:
    """Raw-unit box over the clinical feature vector."""

    shape: tuple[int, ...]
    low: np.ndarray
    high: np.ndarray
    feature_names: tuple[str, ...]

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == self.shape and bool(np.all(x >= self.low) and np.all(x <= self.high))


@dataclass(frozen=True)
class ActionSpace:
    """Multi-binary medication selector."""

    n: int
    action_names: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,)

    def sample(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng or np.random.default_rng()
        return (rng.random(self.n) < 0.5).astype(int)


@dataclass(frozen=True)
class ShimEnvSpec:
    observation_space: ObservationSpace
    action_space: ActionSpace
    metadata: dict = field(default_factory=dict)


def _raise_for_error(response: requests.Response) -> dict:
    try:
        doc = response.json()
    except ValueError:
        response.raise_for_status()
        raise ServiceError("internal", "non-JSON response", response.status_code)
    if isinstance(doc, dict) and "error" in doc:
        code = doc["error"].get("code", "internal")
        message = doc["error"].get("message", "")
        if code == "episode_done":
            raise EpisodeDoneError(code, message, response.status_code)
        raise ServiceError(code, message, response.status_code)
    response.raise_for_status()
    return doc


class RemoteEnv:
    """One live episode against a running simulation service.

    The adapter validates action shape locally before any network call,
    mirrors the service's step payload field for field, and raises
    :class:`EpisodeDoneError` on steps after termination.
    """

    def __init__(
        self,
        base_url: str | None = None,
        cohort: str = "all",
        timeout: float = 30.0,
        session: requests.Session | None = None,
    ):
        url = base_url or os.environ.get(DEFAULT_URL_ENV_VAR)
        if not url:
            raise ValueError(
                f"no service address: pass base_url or set {DEFAULT_URL_ENV_VAR}"
            )
        self.base_url = url.rstrip("/")
        self.cohort = cohort
        self.timeout = timeout
        self._http = session or requests.Session()
        self._session_id: str | None = None

        doc = _raise_for_error(self._http.get(f"{self.base_url}/schema", timeout=timeout))
        bounds = doc.get("observation_bounds", {})
        n_features = len(doc["features"])
        low = np.asarray(bounds.get("low", [-np.inf] * n_features), dtype=float)
        high = np.asarray(bounds.get("high", [np.inf] * n_features), dtype=float)
        self.spec = ShimEnvSpec(
            observation_space=ObservationSpace(
                shape=(n_features,),
                low=low,
                high=high,
                feature_names=tuple(f["name"] for f in doc["features"]),
            ),
            action_space=ActionSpace(
                n=len(doc["actions"]), action_names=tuple(doc["actions"])
            ),
            metadata={
                "cohort": cohort,
                "service": self.base_url,
                "horizon": doc.get("horizon"),
                "dt_months": doc.get("dt_months"),
                "schema_fingerprint": doc.get("fingerprint"),
            },
        )

    @property
    def observation_space(self) -> ObservationSpace:
        return self.spec.observation_space

    @property
    def action_space(self) -> ActionSpace:
        return self.spec.action_space

    @property
    def session_id(self) -> str | None:
        return self._session_id

    # -- canonical episode API ------------------------------------------------

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, dict]:
        body: dict = {"cohort": self.cohort}
        if seed is not None:
            body["seed"] = int(seed)
        doc = _raise_for_error(
            self._http.post(f"{self.base_url}/sessions", json=body, timeout=self.timeout)
        )
        self._session_id = doc["session_id"]
        obs = np.asarray(doc["observation"]["values"], dtype=float)
        return obs, {"session_id": self._session_id, "cohort": self.cohort, "seed": seed}

    def step(self, action) -> tuple[np.ndarray, float, bool, bool, dict]:
        if self._session_id is None:
            raise RuntimeError("reset the environment before stepping")
        bits = np.asarray(action).astype(int).ravel()
        if bits.shape != (self.action_space.n,) or not np.isin(bits, (0, 1)).all():
            raise ValueError(
                f"action must be {self.action_space.n} 0/1 flags, got shape {bits.shape}"
            )
        doc = _raise_for_error(
            self._http.post(
                f"{self.base_url}/sessions/{self._session_id}/step",
                json={"action": bits.tolist()},
                timeout=self.timeout,
            )
        )
        obs = np.asarray(doc["observation"]["values"], dtype=float)
        info = dict(doc.get("info", {}))
        info["session_id"] = self._session_id
        return obs, float(doc["reward"]), bool(doc["terminated"]), bool(doc["truncated"]), info

    def close(self) -> None:
        if self._session_id is not None:
            try:
                self._http.delete(
                    f"{self.base_url}/sessions/{self._session_id}", timeout=self.timeout
                )
            finally:
                self._session_id = None

    def __enter__(self) -> "RemoteEnv":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
