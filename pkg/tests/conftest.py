import pytest

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        verdict = "PASS" if passed else "FAIL"
        line = f"{verdict}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scaled_sim_config():
    """The scaled throughput experiment: N=128, C_B=12 Mb/s, T=32, t0=32 s."""
    from blockclique.chain import ProtocolParams
    from blockclique.netsim import SimConfig

    params = ProtocolParams(thread_count=32, slot_interval=32.0,
                            max_block_size=12_000_000, finality=64,
                            endorsement_slots=0)
    return SimConfig(node_count=128, mean_bandwidth=32e6, mean_latency=0.100,
                     protocol=params, miss_rate=0.0, duration=1800.0, seed=2024)


@pytest.fixture(scope="session")
def scaled_sim_metrics(scaled_sim_config):
    """One 30-simulated-minute run shared by several acceptance criteria."""
    from blockclique.netsim import run_simulation

    return run_simulation(scaled_sim_config)
