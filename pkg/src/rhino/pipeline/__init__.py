"""LLM reasoning stages that map a flow summary onto ATT&CK technique/tactic pairs."""

from rhino.pipeline.stages import (
    BASELINE_CONFIDENCES,
    MAX_MAPPINGS,
    STRATEGIES,
    MappingResult,
    Pipeline,
    PipelineConfig,
    tot_vote,
)
from rhino.pipeline.templates import PromptTemplate, PromptTemplateSet, TemplateError, parse_template
from rhino.pipeline.types import (
    AllCandidatesInvalid,
    Attribute,
    BehaviorDescription,
    Diagnostics,
    LlmFormatError,
    PipelineError,
    PreconditionError,
    RankedMapping,
    TTCandidate,
    parse_technique_id,
)

__all__ = [
    "AllCandidatesInvalid",
    "Attribute",
    "BASELINE_CONFIDENCES",
    "BehaviorDescription",
    "Diagnostics",
    "LlmFormatError",
    "MAX_MAPPINGS",
    "MappingResult",
    "Pipeline",
    "PipelineConfig",
    "PipelineError",
    "PreconditionError",
    "PromptTemplate",
    "PromptTemplateSet",
    "RankedMapping",
    "STRATEGIES",
    "TTCandidate",
    "TemplateError",
    "parse_technique_id",
    "parse_template",
    "tot_vote",
]
