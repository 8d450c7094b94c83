from .base import (
    REDACTION_TOKEN,
    CallLog,
    Completion,
    CriticVerdict,
    CritiqueParseError,
    EmptyResponseError,
    GatewayError,
    GenerationRequest,
    ModelGateway,
    ScriptMissError,
    TransportError,
    is_no_corrections,
    make_step,
    parse_critique,
    redact,
    segment,
    truncate_tokens,
)
from .grading import extract_answer, grade, normalize
from .prompts import PromptTemplates, load_templates, render
from .remote import ChatClient, JudgeGrader, RemoteGateway
from .scripted import ScriptedGateway, ScriptedPolicy, prefix_hash
from .synthetic import SyntheticGateway

__all__ = [
    "REDACTION_TOKEN",
    "CallLog",
    "ChatClient",
    "Completion",
    "CriticVerdict",
    "CritiqueParseError",
    "EmptyResponseError",
    "GatewayError",
    "GenerationRequest",
    "JudgeGrader",
    "ModelGateway",
    "PromptTemplates",
    "RemoteGateway",
    "ScriptMissError",
    "ScriptedGateway",
    "ScriptedPolicy",
    "SyntheticGateway",
    "TransportError",
    "extract_answer",
    "grade",
    "is_no_corrections",
    "load_templates",
    "make_step",
    "normalize",
    "parse_critique",
    "prefix_hash",
    "redact",
    "render",
    "segment",
    "truncate_tokens",
]
