"""
Shared fixtures for the BLE lab test suite.

Provides:
- Seeded worlds and device factories with shipped profiles and GATT layouts
- A companion-driven wearable that keeps a live, syncing connection
- Output isolation via tmp_path
- A fresh structlog configuration per test
- Session-cached runs of every shipped scenario
- State factory for creating RunState dicts
"""
import pytest
import structlog

from attacks import Attacker
from lab import LabRunner, list_scenario_files, load_gatt, load_profile, load_scenario
from protocol import CompanionApp, CompanionPlan, Device, RadioClass, SecurityProfile, provision_bond
from radio import World
from settings import Settings, configure_logging

SEED = 20230415


@pytest.fixture(autouse=True)
def quiet_logging():
    """Each test starts from the WARNING-level stderr pipeline and leaves structlog at its defaults."""
    configure_logging(Settings())
    yield
    structlog.reset_defaults()


@pytest.fixture
def settings(tmp_path):
    """Settings with the shipped assets and a throwaway output directory."""
    return Settings(out_dir=tmp_path / "runs")


@pytest.fixture
def world():
    """Empty world with a fixed seed."""
    return World(SEED)


@pytest.fixture
def make_profile():
    """
    Factory fixture for SecurityProfile objects.
    Starts from a shipped profile (firebolt-invincible by default) and applies overrides.

    Usage:
        profile = make_profile(anti_replay={"mode": "timestamp", "window_ms": 5000})
        profile = make_profile("mi-band-4")
    """
    def _make(base="firebolt-invincible", **overrides):
        data = load_profile(base).model_dump()
        data.update(overrides)
        return SecurityProfile.model_validate(data)
    return _make


@pytest.fixture
def make_device(world):
    """
    Factory fixture that builds a wearable and places it in the world.

    Usage:
        band = make_device("band", profile, position=(0, 0))
    """
    def _make(name, profile, gatt="firebolt-invincible", position=(0.0, 0.0), **kwargs):
        db = load_gatt(gatt) if isinstance(gatt, str) else gatt
        device = Device(name, profile, db, rng=world.rng_for(name), **kwargs)
        world.add(device, position)
        return device
    return _make


@pytest.fixture
def make_attacker(world):
    """Factory fixture for attackers placed in the world (laptop class by default)."""
    def _make(name="attacker", position=(0.0, 3.0), radio_class=RadioClass.LAPTOP):
        attacker = Attacker(name, radio_class, rng=world.rng_for(name))
        world.add(attacker, position)
        return attacker
    return _make


@pytest.fixture
def make_companion(world):
    """
    Factory fixture for a smartphone running the companion app against a wearable.
    The phone sits one metre from the wearable unless a position is given.

    Usage:
        phone, app = make_companion(band, sessions=[{"start_s": 1, "duration_s": 20}])
    """
    def _make(target, position=None, bonded=False, method="secure_connections", **plan):
        plan.setdefault("sessions", [{"start_s": 1, "duration_s": 20}])
        plan.setdefault("writes", [{"handle": 18, "value": "alarm:07:30"}])
        plan.setdefault("reads", [16])
        companion_plan = CompanionPlan(pairing_method=method, bonded=bonded, **plan)
        name = f"{target.name}-phone"
        phone = Device(name,
                       SecurityProfile(pairing_method=method, radio_class=RadioClass.SMARTPHONE, discoverable=False),
                       role="central", rng=world.rng_for(name))
        x, y = target.position
        world.add(phone, position or (x, y + 1))
        if bonded:
            provision_bond(phone, target)
        app = CompanionApp(phone, target, companion_plan)
        app.start()
        return phone, app
    return _make


@pytest.fixture
def make_state():
    """
    Factory fixture for creating RunState-compatible dicts.
    Override any key via keyword arguments.

    Usage:
        state = make_state(scenario=scenario)
    """
    def _make(**overrides):
        defaults = {
            "scenario": None,
            "out_dir": None,
            "world": None,
            "devices": {},
            "outcomes": [],
            "verdicts": [],
        }
        defaults.update(overrides)
        return defaults
    return _make


@pytest.fixture(scope="session")
def shipped_runs(tmp_path_factory):
    """
    Runs every shipped scenario once per test session through the workflow.
    Returns {scenario name: final RunState}; tests must not mutate them.
    """
    configure_logging(Settings())
    runner = LabRunner()
    runs = {}
    for path in list_scenario_files():
        scenario = load_scenario(path)
        runs[scenario.name] = runner.get_workflow().invoke(
            {"scenario": scenario, "out_dir": tmp_path_factory.mktemp(scenario.name)}
        )
    return runs
