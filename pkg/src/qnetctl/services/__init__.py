from .fringe import FringeDataset, FringeFit, TPIResult, fit_fringe, run_tpi
from .service import RunRecord, ServiceConfig, entanglement_service
from .tomography import TomographyRecord, reconstruct_density_matrix, run_qst

__all__ = [
    "FringeDataset", "FringeFit", "TPIResult", "fit_fringe", "run_tpi",
    "RunRecord", "ServiceConfig", "entanglement_service",
    "TomographyRecord", "reconstruct_density_matrix", "run_qst",
]
