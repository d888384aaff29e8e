"""faasml: serverless-style distributed ML training at desk scale.

Library layers: numerical substrate (data, models, optimizers), the
storage-mediated communication stack (storage, collectives, ps), the worker
runtime with a deterministic virtual-clock simulator (sim, runtime), and the
analytical cost model (costmodel). The cli module exposes the train / model /
estimate subcommands.
"""

from .costmodel import CostModelParams, PricingTable, faas_time, iaas_time
from .data import Dataset, Partition, generate_synthetic, load_libsvm
from .runtime import DatasetSpec, JobConfig, JobReport, run_job

__all__ = [
    "CostModelParams", "PricingTable", "faas_time", "iaas_time",
    "Dataset", "Partition", "generate_synthetic", "load_libsvm",
    "DatasetSpec", "JobConfig", "JobReport", "run_job",
]

__version__ = "0.1.0"
