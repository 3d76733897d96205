"""Few-shot bioacoustic retrieval evaluation engine.

Peak-finding slice extraction, corpus windowing and splits, pooled-melspec
and external embeddings, nearest-centroid retrieval, and ROC-AUC reporting.
"""

__version__ = "0.1.0"

from .audio import (MelSpectrogram, PcenParams, SpectrogramParams, Waveform, compute_log_melspec,
                    compute_pcen_melspec, load_waveform)
from .corpus import (Annotation, Ignored, Recording, SplitSpec, TaxonomyMap, Window, build_windows,
                     construct_splits, middle_crop, resample_to_distribution, resolve_taxonomy,
                     window_xc_recording)
from .embed import (AudioSource, EmbeddingMatrix, PooledMelspecEmbedder, PoolParams, embed_store_read,
                    embed_store_write, external_embed, load_learned_representation,
                    pooled_melspec_embed)
from .metrics import EvalReport, average_over_samples, build_report, geometric_croc_auc, roc_auc
from .peakfind import PeakfindParams, Slice, cwt_ricker, denoise, extract_slices, find_ridge_peaks
from .retrieval import (Query, RankedList, build_centroid_query, cosine_score, rank_candidates,
                        sample_exemplar_sets)
from .pipeline import RunConfig, run_pipeline
from .synth import generate_synthetic_corpus
