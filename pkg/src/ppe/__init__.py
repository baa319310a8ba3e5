"""Position-preserving visual token compression with chunked rotary IDs."""

from .attention import (AttentionConfig, AttentionMap, ToyAttentionBlock, attention_entropy,
                        attention_scores, attention_variance, project_heatmap)
from .cascade import (PipelineConfig, PipelineReport, StageSpec, run_pipeline,
                      run_spatiotemporal)
from .clustering import (ClusterAssignment, DensityProfile, assign_members, dpc_knn,
                         knn_density, select_centers, temporal_cluster)
from .errors import ConfigError, ContractError, DataError, ParameterError, PipelineError
from .fileio import load_tokens, save_tokens
from .merge import (SourceRecord, TokenSet, compress_stage, ids_retained, merge_embeddings,
                    select_topk_ids)
from .rope import (Position3D, RopeConfig, build_frequencies, fill_mrope_ids, merge_ppe_ids,
                   rotate)
from .synth import gen_synthetic

__version__ = "0.1.0"
