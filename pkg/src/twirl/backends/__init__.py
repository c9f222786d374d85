"""Clients for the policy model, judges and embedders, plus offline fakes."""

from .chat import ChatClient, ChatRequest, ChatResponse, encode_message
from .embed import HashEmbedder, HttpEmbedder, ScriptedEmbedder, cosine
from .judges import JudgePool, JudgeVerdict, LLMJudge, ReplayJudge, ScriptedJudge, parse_score
from .policy import ChatPolicy, ModelBackend, RandomPolicy, ReplayPolicy

__all__ = [
    "ChatClient",
    "ChatPolicy",
    "ChatRequest",
    "ChatResponse",
    "HashEmbedder",
    "HttpEmbedder",
    "JudgePool",
    "JudgeVerdict",
    "LLMJudge",
    "ModelBackend",
    "RandomPolicy",
    "ReplayJudge",
    "ReplayPolicy",
    "ScriptedEmbedder",
    "ScriptedJudge",
    "cosine",
    "encode_message",
    "parse_score",
]
