"""Few-mode fiber beam patterns, dual-path M^2 and a CNN M^2 regressor."""
from .beam_quality import (
    M2Result,
    ModalM2,
    m2_direct,
    m2_effective,
    m2_vcm,
    moments,
    prediction_error,
    propagate,
)
from .dataset import (
    SCALING_CONSTANTS,
    generate_dataset,
    load_arrays,
    load_dataset,
    scale_label,
    stream_online,
    unscale_label,
)
from .fiber_modes import (
    EXPERIMENT_FIBER,
    DEFAULT_FIBER,
    FiberSpec,
    Grid,
    LPMode,
    mode_field,
    mode_fields,
    solve_modes,
    v_number,
)
from .field_synthesis import (
    CASES,
    ComplexField,
    IntensityImage,
    ModalVector,
    add_noise,
    intensity,
    normalize_for_input,
    sample_modal_vector,
    superpose,
)

__version__ = "0.1.0"
