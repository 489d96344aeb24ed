from .mock_server import MockLabeller, load_table
from .providers import (
    HttpProvider,
    Label,
    MalformedResponse,
    NoisyProvider,
    PreferencePair,
    PreferenceProvider,
    RuleProvider,
    TransportError,
    http_label,
    make_provider,
    noisy_label,
    pair_id,
    rule_label,
    sample_pairs,
    trajectory_summary,
)

__all__ = [
    "HttpProvider", "Label", "MalformedResponse", "MockLabeller", "NoisyProvider",
    "PreferencePair", "PreferenceProvider", "RuleProvider", "TransportError", "http_label",
    "load_table", "make_provider", "noisy_label", "pair_id", "rule_label", "sample_pairs",
    "trajectory_summary",
]
