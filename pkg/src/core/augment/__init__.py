"""
分割感知的离线数据增强
"""
from core.augment.elastic import DisplacementField, label_masked_elastic, random_elastic, tumor_weight
from core.augment.intensity import bias_field, polynomial_terms, random_bias_field
from core.augment.params import (AffineParams, BiasFieldParams, ElasticParams, FlipParams,
                                 LabelMaskedElasticParams)
from core.augment.pipeline import (ExpansionReport, PipelineSpec, TransformKind, TransformSpec, apply_pipeline,
                                   expand_dataset)
from core.augment.rng import RngStream, stable_seed
from core.augment.spatial import apply_affine, random_affine, random_flip

__all__ = [
    "AffineParams", "BiasFieldParams", "DisplacementField", "ElasticParams", "ExpansionReport", "FlipParams",
    "LabelMaskedElasticParams", "PipelineSpec", "RngStream", "TransformKind", "TransformSpec",
    "apply_affine", "apply_pipeline", "bias_field", "expand_dataset", "label_masked_elastic",
    "polynomial_terms", "random_affine", "random_bias_field", "random_elastic", "random_flip",
    "stable_seed", "tumor_weight",
]
