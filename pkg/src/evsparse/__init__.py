"""Event-driven sparse convolutional inference.

Runs a trained CNN over event-camera streams in three execution modes:
dense synchronous, sparse synchronous (submanifold sparse convolutions),
and asynchronous per-event updates of a retained network state. All three
agree at active sites; the FLOP ledgers quantify what sparsity saves.
"""

from evsparse.events import Event, EventStream, FrameSequence, generate_events, read_events, write_events
from evsparse.representations import Representation, SlidingWindowState, SparseUpdate, build
from evsparse.sparse import LayerSpec, Rulebook, SparseFeatureMap, dense_forward, sparse_forward
from evsparse.model import NetworkSpec, load_model, random_model, save_model, vgg13_template
from evsparse.engine import NetworkState, init_state, process_event, resync
from evsparse.analysis import FlopLedger, FractalEstimate, fractal_dimension, ledger_for_run

__version__ = "0.1.0"

__all__ = [
    "Event",
    "EventStream",
    "FrameSequence",
    "generate_events",
    "read_events",
    "write_events",
    "Representation",
    "SlidingWindowState",
    "SparseUpdate",
    "build",
    "LayerSpec",
    "Rulebook",
    "SparseFeatureMap",
    "dense_forward",
    "sparse_forward",
    "NetworkSpec",
    "load_model",
    "save_model",
    "random_model",
    "vgg13_template",
    "NetworkState",
    "init_state",
    "process_event",
    "resync",
    "FlopLedger",
    "FractalEstimate",
    "fractal_dimension",
    "ledger_for_run",
    "__version__",
]
