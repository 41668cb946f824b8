"""Grouped FIR-enhanced structured state space model (GFSSM) toolkit."""

from .errors import GfssmError, NonFiniteError, ScheduleError, ShapeError, SizeLimitError
from .gfssm_kernel import (
    FirCoefficients,
    GfssmInstance,
    GroupConfig,
    build_L_gfssm,
    build_L_group,
    fir_filter,
    gfssm_matrix_form,
    grouped_scan,
)
from .rng import Xoshiro256
from .sink_streaming import (
    ChunkCache,
    PromptBank,
    build_P,
    continue_chunk,
    init_fresh,
    monolithic,
    stream,
)
from .ssd_core import (
    SsdInstance,
    build_L_plain,
    random_instance,
    ssd_matrix_form,
    ssd_scan_recurrent,
)

__version__ = "0.1.0"
