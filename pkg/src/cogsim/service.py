"""Session-oriented HTTP service over the episode engine.

Each session owns one live environment; requests against a session are
serialized by a per-session lock while shared artifacts (weights, start-state
mixtures, scaler) stay immutable. Sessions are kept in memory with TTL
eviction, ids carry 128 bits of entropy, and episode logs can be persisted
append-only per session. Wire format is JSON; endpoint paths and payloads are
documented in ``docs/WIRE.md``.
"""

from __future__ import annotations

import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .env import Env, EnvConfig, EpisodeRecord, StepRecord
from .dynamics.interface import DynamicsModel
from .policies.shapley import shapley_attribution
from .schema import ActionVector, FeatureSchema, PatientState, ScalerStats
from .startstate import Cohort, GmmModel

DEFAULT_TTL_SECONDS = 2 * 60 * 60


class ApiError(Exception):
    """Service-level error carrying one of the declared codes."""

    STATUS = {
        "invalid_action_shape": 400,
        "bad_request": 400,
        "session_not_found": 404,
        "episode_done": 409,
        "internal": 500,
    }

    def __init__(self, code: str, message: str):
        if code not in self.STATUS:
            raise ValueError(f"unknown error code {code!r}")
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass
class ServiceArtifacts:
    """Immutable shared state loaded at startup."""

    schema: FeatureSchema
    stats: ScalerStats
    dynamics: DynamicsModel
    start_models: dict[str, GmmModel]
    policies: dict[str, object] = field(default_factory=dict)
    env_config: EnvConfig = field(default_factory=EnvConfig)

    def baseline_state(self) -> np.ndarray:
        """Cohort mean in raw units, used as the attribution baseline."""
        model = self.start_models.get(Cohort.ALL.value) or next(iter(self.start_models.values()))
        z = model.mixture_mean()
        return z * self.stats.std + self.stats.mean


@dataclass
class Session:
    id: str
    env: Env
    cohort: str
    seed: int | None
    created_at: float
    last_access: float
    record: EpisodeRecord
    lock: threading.Lock = field(default_factory=threading.Lock)

    def latest_observation(self) -> PatientState:
        values = (
            self.record.steps[-1].observation
            if self.record.steps
            else self.record.initial_observation
        )
        return PatientState(np.array(values), space="raw")


class SessionStore:
    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS):
        self.ttl = ttl_seconds
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def _evict_expired(self, now: float) -> None:
        dead = [sid for sid, s in self._sessions.items() if now - s.last_access > self.ttl]
        for sid in dead:
            del self._sessions[sid]

    def add(self, session: Session) -> None:
        with self._lock:
            self._evict_expired(time.time())
            self._sessions[session.id] = session

    def get(self, sid: str) -> Session:
        with self._lock:
            now = time.time()
            self._evict_expired(now)
            session = self._sessions.get(sid)
            if session is None:
                raise ApiError("session_not_found", f"no session {sid!r}")
            session.last_access = now
            return session

    def delete(self, sid: str) -> None:
        with self._lock:
            if sid not in self._sessions:
                raise ApiError("session_not_found", f"no session {sid!r}")
            del self._sessions[sid]


def _observation_payload(schema: FeatureSchema, state: PatientState) -> dict:
    values = state.values.tolist()
    return {
        "values": values,
        "named": {name: v for name, v in zip(schema.feature_names, values)},
    }


def create_app(
    artifacts: ServiceArtifacts,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
    log_dir: str | Path | None = None,
) -> FastAPI:
    from fastapi.middleware.cors import CORSMiddleware

    app = FastAPI(title="virtual-patient simulation service")
    # Local interactive tool: the console UI is served from a separate origin.
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    store = SessionStore(ttl_seconds)
    schema = artifacts.schema
    log_path = Path(log_dir) if log_dir else None
    if log_path:
        log_path.mkdir(parents=True, exist_ok=True)

    def append_log(session: Session, line: dict) -> None:
        if log_path:
            with open(log_path / f"{session.id}.jsonl", "a") as fh:
                fh.write(json.dumps(line) + "\n")

    @app.exception_handler(ApiError)
    async def api_error_handler(_: Request, exc: ApiError):
        return JSONResponse(
            status_code=ApiError.STATUS[exc.code],
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.exception_handler(Exception)
    async def unhandled_handler(_: Request, exc: Exception):
        return JSONResponse(
            status_code=500,
            content={"error": {"code": "internal", "message": str(exc)}},
        )

    def new_session(env: Env, cohort: str, seed: int | None, record: EpisodeRecord) -> Session:
        session = Session(
            id=secrets.token_hex(16),
            env=env,
            cohort=cohort,
            seed=seed,
            created_at=time.time(),
            last_access=time.time(),
            record=record,
        )
        store.add(session)
        return session

    def session_view(session: Session) -> dict:
        env = session.env
        return {
            "session_id": session.id,
            "cohort": session.cohort,
            "seed": session.seed,
            "created_at": session.created_at,
            "done": env.done,
            "step_index": env.step_index,
            "termination_reason": env.termination_reason,
            "horizon": env.config.horizon,
            "dt_months": env.config.dt_months,
            "initial_observation": list(session.record.initial_observation),
            "steps": [
                {
                    "step": s.step,
                    "action": list(s.action),
                    "observation": list(s.observation),
                    "reward": s.reward,
                    "terminated": s.terminated,
                    "truncated": s.truncated,
                    "reason": s.reason,
                }
                for s in session.record.steps
            ],
        }

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await request.json() if await request.body() else {}
        cohort = body.get("cohort", Cohort.ALL.value)
        if cohort not in artifacts.start_models:
            raise ApiError("bad_request", f"unknown cohort {cohort!r}")
        seed = body.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ApiError("bad_request", "seed must be an integer")
        config = EnvConfig(
            horizon=artifacts.env_config.horizon,
            dt_months=artifacts.env_config.dt_months,
            validity_sigma=artifacts.env_config.validity_sigma,
            rxx=artifacts.env_config.rxx,
            reward_clip=artifacts.env_config.reward_clip,
            penalty=artifacts.env_config.penalty,
            cohort=Cohort(cohort),
        )
        env = Env(schema, config, artifacts.dynamics, artifacts.stats, artifacts.start_models)
        obs = env.reset(seed=seed)
        record = EpisodeRecord(
            initial_observation=tuple(obs.values.tolist()), seed=seed, cohort=cohort
        )
        session = new_session(env, cohort, seed, record)
        append_log(session, {"type": "reset", "observation": obs.values.tolist(), "seed": seed, "cohort": cohort})
        return {
            "session_id": session.id,
            "observation": _observation_payload(schema, obs),
            "cohort": cohort,
            "horizon": env.config.horizon,
            "dt_months": env.config.dt_months,
        }

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = store.get(sid)
        with session.lock:
            return session_view(session)

    @app.post("/sessions/{sid}/step")
    async def step_session(sid: str, request: Request):
        session = store.get(sid)
        body = await request.json()
        bits = body.get("action")
        if (
            not isinstance(bits, list)
            or len(bits) != schema.n_actions
            or any(b not in (0, 1, True, False) for b in bits)
        ):
            raise ApiError(
                "invalid_action_shape",
                f"action must be a list of {schema.n_actions} 0/1 flags",
            )
        with session.lock:
            if session.env.done:
                raise ApiError("episode_done", "episode already ended; fork or create a new session")
            action = ActionVector(np.array(bits, dtype=bool))
            result = session.env.step(action)
            step_no = len(session.record.steps) + 1
            reason = result.info.get("termination_reason", "none")
            session.record.steps.append(
                StepRecord(
                    step=step_no,
                    action=tuple(int(b) for b in action.bits),
                    observation=tuple(result.observation.values.tolist()),
                    reward=result.reward,
                    terminated=result.terminated,
                    truncated=result.truncated,
                    reason=reason,
                )
            )
            payload = {
                "observation": _observation_payload(schema, result.observation),
                "reward": result.reward,
                "terminated": result.terminated,
                "truncated": result.truncated,
                "info": result.info,
            }
            append_log(
                session,
                {
                    "type": "step",
                    "step": step_no,
                    "action": [int(b) for b in action.bits],
                    "observation": result.observation.values.tolist(),
                    "reward": result.reward,
                    "terminated": result.terminated,
                    "truncated": result.truncated,
                    "reason": reason,
                },
            )
            return payload

    @app.post("/sessions/{sid}/fork")
    def fork_session(sid: str):
        session = store.get(sid)
        with session.lock:
            child_env = session.env.fork()
            child_record = EpisodeRecord(
                initial_observation=session.record.initial_observation,
                seed=session.seed,
                cohort=session.cohort,
            )
            child_record.steps = list(session.record.steps)
            child = new_session(child_env, session.cohort, session.seed, child_record)
        return {"session_id": child.id, "forked_from": sid, "done": child.env.done}

    @app.delete("/sessions/{sid}")
    def delete_session(sid: str):
        store.delete(sid)
        return {"deleted": sid}

    @app.get("/sessions/{sid}/suggest")
    def suggest(sid: str, policy: str, attribute: bool = False, samples: int = 50):
        if policy not in artifacts.policies:
            raise ApiError("bad_request", f"unknown policy {policy!r}")
        session = store.get(sid)
        with session.lock:
            obs = session.latest_observation()
            pol = artifacts.policies[policy]
            action = pol.act(obs)
            payload: dict = {
                "policy": policy,
                "action": [int(b) for b in action.bits],
                "action_names": list(action.names(schema)),
            }
            if attribute:
                samples = max(1, min(int(samples), 500))
                target = int(np.argmax(action.bits))
                values = shapley_attribution(
                    pol,
                    [obs],
                    action_index=target,
                    n_samples=samples,
                    seed=0,
                    baseline=artifacts.baseline_state(),
                )
                payload["attribution"] = {
                    "action_index": target,
                    "action_name": schema.actions[target],
                    "values": values.tolist(),
                    "feature_names": list(schema.feature_names),
                }
            return payload

    @app.get("/schema")
    def get_schema():
        # Raw-unit observation bounds: the environment's plausibility band for
        # continuous features, 0/1 for indicators.
        sigma = artifacts.env_config.validity_sigma
        cont = schema.continuous_mask
        low = np.where(cont, artifacts.stats.mean - sigma * artifacts.stats.std, 0.0)
        high = np.where(cont, artifacts.stats.mean + sigma * artifacts.stats.std, 1.0)
        return {
            "name": schema.name,
            "features": [
                {"name": f.name, "kind": f.kind, "unit": f.unit} for f in schema.features
            ],
            "actions": list(schema.actions),
            "time_feature": schema.time_feature,
            "no_medication_action": schema.no_medication_action,
            "ad_treatment_action": schema.ad_treatment_action,
            "memory_score_feature": schema.memory_score_feature,
            "horizon": artifacts.env_config.horizon,
            "dt_months": artifacts.env_config.dt_months,
            "cohorts": sorted(artifacts.start_models.keys()),
            "fingerprint": schema.fingerprint(),
            "observation_bounds": {"low": low.tolist(), "high": high.tolist()},
        }

    @app.get("/policies")
    def get_policies():
        return {
            "policies": [
                {"name": name, "deterministic": bool(getattr(p, "deterministic", False))}
                for name, p in sorted(artifacts.policies.items())
            ]
        }

    return app
