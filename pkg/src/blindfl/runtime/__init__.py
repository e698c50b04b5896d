"""Federation runtime: wire codec, transports, configuration and rounds."""

from .codec import (
    DEFAULT_FRAME_CAP,
    FRAME_OVERHEAD,
    CodecError,
    FrameCapExceeded,
    Kind,
    MalformedFrame,
    RoundMismatchError,
    UnknownKind,
    WireMessage,
    decode_message,
    encode_message,
)
from .config import (
    AttackConfig,
    ConfigError,
    FederationConfig,
    load_attack_config,
    load_federation_config,
    parse_attack_config,
    parse_federation_config,
)
from .federation import (
    METRIC_COLUMNS,
    Federation,
    FederationError,
    FrameRecord,
    PlaintextLeak,
    RoundMetrics,
    RoundTimeout,
    account_bytes,
    metrics_csv,
    run_experiment,
)
from .transport import InProcessTransport, SocketTransport, Transport, TransportError

__all__ = [
    "DEFAULT_FRAME_CAP",
    "FRAME_OVERHEAD",
    "CodecError",
    "FrameCapExceeded",
    "Kind",
    "MalformedFrame",
    "RoundMismatchError",
    "UnknownKind",
    "WireMessage",
    "decode_message",
    "encode_message",
    "AttackConfig",
    "ConfigError",
    "FederationConfig",
    "load_attack_config",
    "load_federation_config",
    "parse_attack_config",
    "parse_federation_config",
    "METRIC_COLUMNS",
    "Federation",
    "FederationError",
    "FrameRecord",
    "PlaintextLeak",
    "RoundMetrics",
    "RoundTimeout",
    "account_bytes",
    "metrics_csv",
    "run_experiment",
    "InProcessTransport",
    "SocketTransport",
    "Transport",
    "TransportError",
]
