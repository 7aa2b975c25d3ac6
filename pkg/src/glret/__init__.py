"""Post-backbone landmark retrieval pipeline.

Cosine-softmax embedding head with fixed AdaCos scaling, exact kNN lookup,
mAP@100 scoring and weighted embedding ensembles.
"""

from .embstore import EmbeddingSet, align_by_ids, l2_normalize, load_embeddings, read_glre, save_embeddings, write_glre
from .ensemble import concat_weighted
from .knncore import NeighborList, squared_euclidean, top_k_search
from .retmetrics import average_precision_at_k, mean_ap_at_100

__version__ = "0.1.0"
