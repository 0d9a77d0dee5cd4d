"""SIMSEA: cleaning cue-qualified image-search results by cross-subsearch
visual matching, with precision/recall evaluation against human labels."""

__version__ = "0.1.0"

from .codebook import (
    BowVector,
    Codebook,
    bow_vector,
    load_codebook,
    quantize,
    quantize_batch,
    sample_training_images,
    save_codebook,
    train_codebook,
)
from .config import PipelineConfig, load_config
from .corpus import (
    CorpusManifest,
    GrayRaster,
    ImageRecord,
    SubsearchSpec,
    decode_to_gray,
    fetch_images,
    load_manifest,
    record_id,
)
from .errors import (
    CodebookError,
    ConfigError,
    DecodeError,
    DegenerateVectorError,
    LabelsError,
    ManifestError,
    MatchingError,
    MissingPrerequisiteError,
    PipelineLockedError,
    SimseaError,
    StaleArtifactError,
)
from .evaluation import (
    EvalReport,
    GroundTruthLabels,
    RelevanceScore,
    evaluate_methods,
    load_labels,
    precision_recall,
    rank_relevance_agreement,
    relevance_scores,
)
from .features import (
    DescriptorParams,
    DescriptorSet,
    extract_dense_descriptors,
    read_descriptor_dump,
    write_descriptor_dump,
)
from .matching import (
    RankingTable,
    ResultSet,
    SimilarityMatrix,
    bhattacharyya,
    build_similarity_matrix,
    chi_square_distance,
    comparison_count,
    compute_ranking_factors,
    hellinger,
    select_result_set,
)
from .pipeline import Pipeline, STAGES

__all__ = [name for name in dir() if not name.startswith("_")]
