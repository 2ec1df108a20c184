"""Blockclique: a multithreaded block-DAG ledger with transaction sharding,
clique-based Nakamoto consensus, a finality-attack analyzer, and a
discrete-event peer-to-peer network simulator."""

from .chain import (
    Address,
    Block,
    BlockStore,
    Endorsement,
    Ledger,
    ProtocolParams,
    Slot,
    Transaction,
    apply_block_to_ledger,
    decode_block,
    encode_block,
    make_genesis,
    slot_timestamp,
    thread_of_address,
    validate_block_structure,
)
from .consensus import CompatibilityState, HeaderMeta, replay_trace
from .selection import SelectionOracle, fitness
from .security import (
    FitnessChain,
    ThreatModel,
    attack_duration_stats,
    attack_success_probability,
    closed_form_success,
    duration_tail_bound,
    jump_probabilities,
    newcomer_safety_threshold,
    simulate_attacks,
)
from .netsim import NetworkTopology, SimConfig, SimMetrics, build_topology, measure_confirmation, run_simulation

__version__ = "0.1.0"
