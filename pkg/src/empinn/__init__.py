"""Element-wise multiplication PINNs on NumPy with exact input-derivative jets."""
from .config import ExperimentConfig, preset
from .diffcore import ConfigurationError, DivergedTrainingError
from .harness import RunRecord, run_ablation, run_experiment, run_probe
from .network import EmbeddingSpec, NetworkConfig, init_params, predict

__all__ = [
    "ConfigurationError",
    "DivergedTrainingError",
    "EmbeddingSpec",
    "ExperimentConfig",
    "NetworkConfig",
    "RunRecord",
    "init_params",
    "predict",
    "preset",
    "run_ablation",
    "run_experiment",
    "run_probe",
]
