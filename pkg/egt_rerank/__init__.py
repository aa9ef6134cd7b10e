from .egt import EgtParams, egt_traverse, rerank_all, semisup_egt
from .evaluation import average_precision_at, mean_ap
from .knn import KnnGraph, blend, build_pipeline_graph, knn_build, symmetrize
from .parallel import get_threads, set_threads
from .qe import QeParams, qe_sv_pass
from .store import DescriptorSet, DescriptorSets, load_descriptors, save_descriptors
from .sv import RansacParams, ransac_affine, sv_rerank
from .synthetic import SynthParams, gen_synthetic
from .utils import get_logger
from .version import __version__

THREADS = None
LOGGER = get_logger()
