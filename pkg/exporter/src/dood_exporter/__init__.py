"""Feature exporter feeding the diffusion OoD scoring pipeline."""

__version__ = "0.1.0"

from .dtf import read_dtf, write_dtf
from .export import ExportSpec, convert_label_map, export_features, export_masks

__all__ = [
    "ExportSpec",
    "convert_label_map",
    "export_features",
    "export_masks",
    "read_dtf",
    "write_dtf",
    "__version__",
]
