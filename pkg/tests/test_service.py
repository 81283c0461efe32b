"""Session service: lifecycle, error codes, isolation, suggestions."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from cogsim.env import EnvConfig
from cogsim.policies import HeuristicPolicy, NoMedicationPolicy
from cogsim.service import ServiceArtifacts, create_app
from cogsim.startstate import GmmModel


@pytest.fixture(scope="module")
def artifacts(schema, raw_stats):
    from cogsim.dynamics import LinearGaussianDynamics

    d, na = schema.n_features, schema.n_actions
    drift = np.zeros(d)
    drift[schema.memory_index] = -0.05
    effects = np.zeros((na, d))
    effects[schema.ad_treatment_index, schema.memory_index] = 0.05
    dynamics = LinearGaussianDynamics(d, na, drift=drift, action_effects=effects)

    def gmm(memory_z):
        mean = np.zeros(d)
        mean[schema.memory_index] = memory_z
        for idx in schema.onehot_group_indices().values():
            mean[idx[0]] = 1.0
        cov = np.eye(d) * 1e-10
        cov[schema.memory_index, schema.memory_index] = 0.25
        return GmmModel(
            weights=np.array([1.0]), means=mean[None], covariances=cov[None],
            log_likelihood=0.0, n_samples=1, seed=0,
        )

    return ServiceArtifacts(
        schema=schema,
        stats=raw_stats,
        dynamics=dynamics,
        start_models={"all": gmm(0.0), "impaired": gmm(-1.5), "healthy": gmm(0.7)},
        policies={"no_medication": NoMedicationPolicy(schema), "heuristic": HeuristicPolicy(schema)},
        env_config=EnvConfig(),
    )


@pytest.fixture()
def client(artifacts):
    return TestClient(create_app(artifacts), raise_server_exceptions=False)


def no_med_bits(schema):
    bits = [0] * schema.n_actions
    bits[schema.no_medication_index] = 1
    return bits


def test_create_session_and_schema(client, schema):
    r = client.post("/sessions", json={"cohort": "all", "seed": 1})
    assert r.status_code == 200
    doc = r.json()
    assert len(doc["session_id"]) == 32  # 128 bits hex
    assert len(doc["observation"]["values"]) == schema.n_features
    assert doc["observation"]["named"]["ADNI_MEM"] == doc["observation"]["values"][schema.memory_index]

    s = client.get("/schema").json()
    assert [f["name"] for f in s["features"]] == list(schema.feature_names)
    assert s["actions"] == list(schema.actions)
    assert s["horizon"] == 22
    assert sorted(s["cohorts"]) == ["all", "healthy", "impaired"]


def test_same_seed_same_observation(client):
    a = client.post("/sessions", json={"cohort": "all", "seed": 7}).json()
    b = client.post("/sessions", json={"cohort": "all", "seed": 7}).json()
    assert a["observation"]["values"] == b["observation"]["values"]


def test_unknown_cohort_rejected(client):
    r = client.post("/sessions", json={"cohort": "x"})
    assert r.status_code == 400
    assert r.json()["error"]["code"] == "bad_request"


def test_impaired_cohort_distribution(client, schema):
    below = 0
    for seed in range(40):
        doc = client.post("/sessions", json={"cohort": "impaired", "seed": seed}).json()
        below += doc["observation"]["named"]["ADNI_MEM"] < -0.1
    assert below >= 38


def test_step_flow_and_errors(client, schema):
    sid = client.post("/sessions", json={"cohort": "all", "seed": 3}).json()["session_id"]

    r = client.post(f"/sessions/{sid}/step", json={"action": [0, 1]})
    assert r.status_code == 400
    assert r.json()["error"]["code"] == "invalid_action_shape"

    r = client.post(f"/sessions/{sid}/step", json={"action": no_med_bits(schema)})
    assert r.status_code == 200
    doc = r.json()
    assert -10 <= doc["reward"] <= 10
    assert not doc["terminated"]

    # all-zero action: the environment rule surfaces over the wire
    r = client.post(f"/sessions/{sid}/step", json={"action": [0] * schema.n_actions})
    assert r.status_code == 200
    assert r.json()["reward"] == -10.0
    assert r.json()["terminated"] is True

    r = client.post(f"/sessions/{sid}/step", json={"action": no_med_bits(schema)})
    assert r.status_code == 409
    assert r.json()["error"]["code"] == "episode_done"


def test_session_not_found(client, schema):
    r = client.post("/sessions/deadbeef/step", json={"action": no_med_bits(schema)})
    assert r.status_code == 404
    assert r.json()["error"]["code"] == "session_not_found"
    assert client.get("/sessions/deadbeef").status_code == 404
    assert client.delete("/sessions/deadbeef").status_code == 404


def test_get_is_idempotent(client, schema):
    sid = client.post("/sessions", json={"cohort": "all", "seed": 4}).json()["session_id"]
    client.post(f"/sessions/{sid}/step", json={"action": no_med_bits(schema)})
    a = client.get(f"/sessions/{sid}").json()
    b = client.get(f"/sessions/{sid}").json()
    a.pop("created_at"); b.pop("created_at")
    assert a == b
    assert a["step_index"] == 1


def test_session_isolation_interleaved(client, schema):
    s1 = client.post("/sessions", json={"cohort": "all", "seed": 10}).json()["session_id"]
    s2 = client.post("/sessions", json={"cohort": "all", "seed": 10}).json()["session_id"]
    obs1, obs2 = [], []
    for _ in range(4):
        obs1.append(client.post(f"/sessions/{s1}/step", json={"action": no_med_bits(schema)}).json())
        obs2.append(client.post(f"/sessions/{s2}/step", json={"action": no_med_bits(schema)}).json())
    # deterministic dynamics + same seed: interleaving must not leak state
    for a, b in zip(obs1, obs2):
        assert a["observation"]["values"] == b["observation"]["values"]
        assert a["reward"] == b["reward"]


def test_fork_semantics(client, schema):
    sid = client.post("/sessions", json={"cohort": "all", "seed": 5}).json()["session_id"]
    client.post(f"/sessions/{sid}/step", json={"action": no_med_bits(schema)})
    child = client.post(f"/sessions/{sid}/fork").json()["session_id"]

    treat = [0] * schema.n_actions
    treat[schema.ad_treatment_index] = 1
    a = client.post(f"/sessions/{sid}/step", json={"action": treat}).json()
    b = client.post(f"/sessions/{child}/step", json={"action": treat}).json()
    assert a["observation"]["values"] == b["observation"]["values"]

    a2 = client.post(f"/sessions/{sid}/step", json={"action": no_med_bits(schema)}).json()
    b2 = client.post(f"/sessions/{child}/step", json={"action": treat}).json()
    mem = schema.memory_index
    assert a2["observation"]["values"][mem] != b2["observation"]["values"][mem]

    view = client.get(f"/sessions/{child}").json()
    assert view["steps"][0]["action"] == no_med_bits(schema)  # shared prefix


def test_fork_done_episode(client, schema):
    sid = client.post("/sessions", json={"cohort": "all", "seed": 6}).json()["session_id"]
    client.post(f"/sessions/{sid}/step", json={"action": [0] * schema.n_actions})
    child = client.post(f"/sessions/{sid}/fork").json()
    assert child["done"] is True


def test_suggest_heuristic(client, schema):
    sid = client.post("/sessions", json={"cohort": "impaired", "seed": 2}).json()["session_id"]
    doc = client.get(f"/sessions/{sid}/suggest", params={"policy": "heuristic"}).json()
    assert doc["action_names"] == ["AD Treatment_active"]

    r = client.get(f"/sessions/{sid}/suggest", params={"policy": "nope"})
    assert r.status_code == 400

    doc2 = client.get(
        f"/sessions/{sid}/suggest",
        params={"policy": "no_medication", "attribute": "true", "samples": 10},
    ).json()
    assert doc2["action_names"] == ["No Medication_active"]
    attr = doc2["attribution"]
    assert len(attr["values"]) == schema.n_features
    # constant policy score: attribution mass is exactly zero
    assert max(abs(v) for v in attr["values"]) < 1e-12


def test_policies_listing(client):
    doc = client.get("/policies").json()
    names = [p["name"] for p in doc["policies"]]
    assert names == ["heuristic", "no_medication"]


def test_session_logs_append_only(artifacts, tmp_path, schema):
    app = create_app(artifacts, log_dir=tmp_path)
    client = TestClient(app)
    sid = client.post("/sessions", json={"cohort": "all", "seed": 8}).json()["session_id"]
    client.post(f"/sessions/{sid}/step", json={"action": no_med_bits(schema)})
    log_file = tmp_path / f"{sid}.jsonl"
    lines = log_file.read_text().strip().splitlines()
    assert len(lines) == 2
    import json

    assert json.loads(lines[0])["type"] == "reset"
    assert json.loads(lines[1])["type"] == "step"


def test_ttl_eviction(artifacts, schema):
    client = TestClient(create_app(artifacts, ttl_seconds=0.0))
    sid = client.post("/sessions", json={"cohort": "all", "seed": 9}).json()["session_id"]
    import time

    time.sleep(0.01)
    assert client.get(f"/sessions/{sid}").status_code == 404
