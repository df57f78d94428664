"""CartNet: ADP prediction for crystal structures with Cartesian graph networks."""
from .augment import random_rotation, rotate_adp, rotate_graph, rotation_consistency
from .cif import expand_symmetry, parse_cif, read_cif
from .crystal import AtomSite, CrystalStructure, LatticeCell, ellipsoid_volume
from .curation import CurationCriteria, RejectCode, curate
from .dataset import DatasetSplit, read_dataset, split_dataset, write_dataset
from .estimator import CartNetRegressor, RadiusGraphTransformer
from .graph import CrystalGraph, build_graph, collate
from .metrics import MetricsReport, adp_iou, adp_mae, evaluate, s12
from .model import CartNet, ModelConfig, TemperatureStats
from .training import TrainConfig, onecycle_lr, train

__version__ = "0.1.0"

__all__ = [
    "AtomSite", "CartNet", "CartNetRegressor", "CrystalGraph", "CrystalStructure",
    "CurationCriteria", "DatasetSplit", "LatticeCell", "MetricsReport", "ModelConfig",
    "RadiusGraphTransformer", "RejectCode", "TemperatureStats", "TrainConfig",
    "adp_iou", "adp_mae", "build_graph", "collate", "curate", "ellipsoid_volume",
    "evaluate", "expand_symmetry", "onecycle_lr", "parse_cif", "random_rotation",
    "read_cif", "read_dataset", "rotate_adp", "rotate_graph", "rotation_consistency",
    "s12", "split_dataset", "train", "write_dataset",
]
