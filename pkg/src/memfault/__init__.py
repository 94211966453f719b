"""Simulated memory-encryption fault attack on RSA-CRT signing."""
from .rsa_crt import RsaKey, Signature, keygen, sign_crt, sign_direct, verify
from .recovery import RecoveredKey, RecoveryFailed, recover_full_key, recover_q
from .scenario import ConfigError, ScenarioConfig, load_config, preset
from .orchestrator import Outcome, run_attack_trial, run_experiment

__all__ = [
    "ConfigError", "Outcome", "RecoveredKey", "RecoveryFailed", "RsaKey", "ScenarioConfig",
    "Signature", "keygen", "load_config", "preset", "recover_full_key", "recover_q",
    "run_attack_trial", "run_experiment", "sign_crt", "sign_direct", "verify",
]
