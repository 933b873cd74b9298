from .FeatureSchema import FeatureSchema, FeatureSpec, CausalEdge
from .TabularData import (
    Dataset, TrainingStats, PartitionedData, SyntheticSpec,
    load_csv, encode_frame, partition, select_instances,
    generate_synthetic, generate_synthetic_frame, generate_clustered,
)
from .MlpClassifier import MlpClassifier, TrainConfig, TrainResult, train
from .PriorConfig import PriorConfig
from .ParameterLayout import ParameterLayout, stick_breaking, stick_breaking_inverse
from .PosteriorModel import PosteriorModel, CounterfactualSample, hierarchy_comparison
from .NutsSampler import NutsConfig, SampleBatch, leapfrog, run_chains
from .PointEstimate import BaselineConfig, PointCounterfactual, point_estimate_baseline
from .Diagnostics import ParamSummary, split_rhat, ess, rank_histogram, summarize
from .Metrics import DistanceContext, MetricsReport, evaluate, validity, proximity, sparsity, diversity
from .Robustness import knn_distance, lof, cluster_neighborhoods, robustness_table
from .Fairness import recourse_cost, fairness_table
from .RunManifest import RunManifest
from .errors import RecourseError, InputError, RuntimeFailure

__all__ = ['FeatureSchema', 'FeatureSpec', 'CausalEdge',
           'Dataset', 'TrainingStats', 'PartitionedData', 'SyntheticSpec',
           'load_csv', 'encode_frame', 'partition', 'select_instances',
           'generate_synthetic', 'generate_synthetic_frame', 'generate_clustered',
           'MlpClassifier', 'TrainConfig', 'TrainResult', 'train',
           'PriorConfig', 'ParameterLayout', 'stick_breaking', 'stick_breaking_inverse',
           'PosteriorModel', 'CounterfactualSample', 'hierarchy_comparison',
           'NutsConfig', 'SampleBatch', 'leapfrog', 'run_chains',
           'BaselineConfig', 'PointCounterfactual', 'point_estimate_baseline',
           'ParamSummary', 'split_rhat', 'ess', 'rank_histogram', 'summarize',
           'DistanceContext', 'MetricsReport', 'evaluate', 'validity', 'proximity', 'sparsity', 'diversity',
           'knn_distance', 'lof', 'cluster_neighborhoods', 'robustness_table',
           'recourse_cost', 'fairness_table', 'RunManifest',
           'RecourseError', 'InputError', 'RuntimeFailure']
