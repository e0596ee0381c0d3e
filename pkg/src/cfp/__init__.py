"""Class feature pyramids: back-step a 3D CNN's prediction into the kernels
that drive it, and render the result as spatio-temporal heatmaps."""

from .backstep import (
    BackstepConfig,
    SelectionResult,
    adapt_block,
    backstep_layer,
    build_pyramid,
    class_seed,
)
from .errors import BundleError, CfpError, ConfigError, InvalidInputError
from .inference import ActivationStore, conv3d_forward, forward_all, node_forward
from .model_io import (
    ClipBundle,
    LayerNode,
    ModelGraph,
    ValidationReport,
    load_clip,
    load_model_bundle,
    read_pyramid_graph,
    validate_graph,
    write_clip,
    write_model_bundle,
    write_pyramid_graph,
)
from .pyramid import PyramidGraph
from .tensor_ops import (
    GateResult,
    elementwise_product_reduce,
    global_avg_pool,
    minmax_normalize,
    sigmoid_gate,
    softmax_argmax,
)
from .viz import (
    ActivationVolume,
    OverlayStyle,
    feature_wise_map,
    layer_wise_map,
    render_overlay,
    spline_upsample,
)

__version__ = "0.1.0"
