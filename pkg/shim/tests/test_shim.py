"""Shim behavior against a live service process, including CLI parity."""

import json
import socket
import subprocess
import sys
import time

import numpy as np
import pytest
import requests

from cogsim_shim import EpisodeDoneError, RemoteEnv, ServiceError


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """Deterministic artifacts built through the engine's own CLI."""
    base = tmp_path_factory.mktemp("artifacts")

    def run(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "cogsim.cli", *args],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    run("synth-data", "--n", "80", "--seed", "42", "--out", str(base / "raw.csv"))
    run(
        "preprocess", "--in", str(base / "raw.csv"),
        "--out-cohort", str(base / "cohort.csv"),
        "--out-split", str(base / "split.csv"),
        "--out-stats", str(base / "stats.json"), "--seed", "42",
    )
    run(
        "fit-gmm", "--cohort", str(base / "cohort.csv"),
        "--split", str(base / "split.csv"), "--stats", str(base / "stats.json"),
        "--k-max", "3", "--out-dir", str(base / "gmm"), "--seed", "42",
    )
    # deterministic linear forecaster for byte-exact parity checks
    code = f"""
import numpy as np
from cogsim.schema import default_schema
from cogsim.dynamics import LinearGaussianDynamics
schema = default_schema()
d, na = schema.n_features, schema.n_actions
drift = np.zeros(d); drift[schema.memory_index] = -0.04
effects = np.zeros((na, d)); effects[schema.ad_treatment_index, schema.memory_index] = 0.05
LinearGaussianDynamics(d, na, drift=drift, action_effects=effects).save(r"{base / 'dyn.tensors'}")
"""
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return base


@pytest.fixture(scope="module")
def service(artifacts):
    port = free_port()
    proc = subprocess.Popen(
        [
            sys.executable, "-m", "cogsim.cli", "serve",
            "--host", "127.0.0.1", "--port", str(port),
            "--dynamics", f"linear:{artifacts / 'dyn.tensors'}",
            "--stats", str(artifacts / "stats.json"),
            "--gmm-dir", str(artifacts / "gmm"),
        ],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE,
    )
    url = f"http://127.0.0.1:{port}"
    try:
        for _ in range(100):
            try:
                if requests.get(f"{url}/schema", timeout=1).status_code == 200:
                    break
            except requests.ConnectionError:
                time.sleep(0.1)
        else:
            raise RuntimeError(f"service never came up: {proc.stderr.read()}")
        yield url
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def no_med_bits(env: RemoteEnv) -> np.ndarray:
    bits = np.zeros(env.action_space.n, dtype=int)
    bits[env.action_space.action_names.index("No Medication_active")] = 1
    return bits


def test_spec_shapes(service):
    env = RemoteEnv(base_url=service)
    assert env.observation_space.shape == (21,)
    assert env.action_space.n == 17
    assert env.spec.metadata["cohort"] == "all"
    assert env.spec.metadata["horizon"] == 22


def test_reset_and_step_flow(service):
    with RemoteEnv(base_url=service) as env:
        obs, info = env.reset(seed=3)
        assert obs.shape == (21,)
        assert "session_id" in info
        obs2, reward, terminated, truncated, step_info = env.step(no_med_bits(env))
        assert obs2.shape == (21,)
        assert -10 <= reward <= 10
        assert not terminated and not truncated
        assert step_info["session_id"] == info["session_id"]


def test_two_instances_independent(service):
    a = RemoteEnv(base_url=service)
    b = RemoteEnv(base_url=service)
    obs_a, info_a = a.reset(seed=5)
    obs_b, info_b = b.reset(seed=5)
    assert info_a["session_id"] != info_b["session_id"]
    assert np.array_equal(obs_a, obs_b)  # same seed, same start state
    a.close()
    b.close()


def test_shape_violation_raised_before_network(service):
    env = RemoteEnv(base_url=service)
    env.reset(seed=1)
    sid = env.session_id
    with pytest.raises(ValueError):
        env.step([0, 1])
    # session untouched: the bad step never reached the service
    view = requests.get(f"{service}/sessions/{sid}").json()
    assert view["step_index"] == 0


def test_all_zero_action_rule_surfaces(service):
    env = RemoteEnv(base_url=service)
    env.reset(seed=2)
    obs, reward, terminated, truncated, info = env.step(np.zeros(17, dtype=int))
    assert reward == -10.0
    assert terminated and not truncated
    with pytest.raises(EpisodeDoneError):
        env.step(no_med_bits(env))


def test_unknown_cohort_maps_to_service_error(service):
    env = RemoteEnv(base_url=service, cohort="nope")
    with pytest.raises(ServiceError) as err:
        env.reset(seed=0)
    assert err.value.code == "bad_request"


def test_reward_stays_bounded(service):
    env = RemoteEnv(base_url=service)
    env.reset(seed=11)
    for _ in range(22):
        _, reward, terminated, truncated, _ = env.step(no_med_bits(env))
        assert -10.0 <= reward <= 10.0
        if terminated or truncated:
            break


def test_parity_with_cli_rollout(service, artifacts, tmp_path):
    """Scripted 5-step episode: shim tuples == CLI rollout tuples, same seed."""
    seed = 1234
    env = RemoteEnv(base_url=service)
    bits = no_med_bits(env)
    script = [bits.tolist()] * 5
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps(script))

    proc = subprocess.run(
        [
            sys.executable, "-m", "cogsim.cli", "rollout",
            "--policy", "no_medication",
            "--dynamics", f"linear:{artifacts / 'dyn.tensors'}",
            "--stats", str(artifacts / "stats.json"),
            "--gmm-dir", str(artifacts / "gmm"),
            "--seed", str(seed), "--actions-file", str(script_path),
        ],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    lines = [json.loads(l) for l in proc.stdout.strip().splitlines()]
    cli_reset = lines[0]
    cli_steps = [l for l in lines[1:] if l["type"] == "step"]

    obs, _ = env.reset(seed=seed)
    assert obs.tolist() == cli_reset["observation"]
    for cli_step in cli_steps:
        s_obs, s_reward, s_term, s_trunc, _ = env.step(bits)
        assert s_obs.tolist() == cli_step["observation"]
        assert s_reward == cli_step["reward"]
        assert s_term == cli_step["terminated"]
        assert s_trunc == cli_step["truncated"]
    assert len(cli_steps) == 5
