from .graph import (
    ForwardTrace,
    GradientSet,
    LayerSpec,
    LossValue,
    MLPGraph,
    ModelGraph,
    ViTConfig,
    ViTGraph,
    backward,
    build_mlp,
    build_vit,
    forward,
    graph_from_config,
    loss_nll,
)

__all__ = [
    "ForwardTrace", "GradientSet", "LayerSpec", "LossValue", "MLPGraph", "ModelGraph",
    "ViTConfig", "ViTGraph", "backward", "build_mlp", "build_vit", "forward",
    "graph_from_config", "loss_nll",
]
