"""Tensorized probabilistic circuits: compile region graphs into layered
circuits, evaluate and train them in log space, sample exactly, and compress
Tucker-parameterized layers into CP-parameterized ones."""
from .circuit import (
    Circuit,
    FoldedCircuit,
    Layer,
    Parameter,
    check_decomposable,
    check_smooth,
    check_structured,
    collapse_sum_chains,
    compile_circuit,
    fold,
    format_nomenclature,
    parse_nomenclature,
    rewrite_mixing_as_sum,
)
from .data import Dataset, MixtureGenerator, load_csv, load_idx, save_idx, synth
from .estimator import TensorizedCircuitDensity
from .exceptions import (
    ConfigurationError,
    FormatError,
    GuardError,
    InputError,
    PreconditionError,
    StructureError,
    TensCircError,
)
from .factorization import (
    CPFactors,
    HTuckerFactors,
    MPSFactors,
    TuckerFactors,
    compress_tucker_circuit,
    cp_als,
    htucker_to_circuit,
    mps_to_circuit,
    tucker_to_circuit,
)
from .families import Binomial, Categorical, Embedding, Gaussian
from .inference import evaluate_linear, forward, log_partition, marginal, reconstruct_tensor, sample
from .learning import TrainConfig, backward, bpd, nll, normalize, train
from .region_graph import (
    RegionGraph,
    build_cl,
    build_lt,
    build_pd,
    build_qg,
    build_qt,
    build_rnd,
    validate,
)
from .serialization import load_circuit, save_circuit

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
