from .llm import (
    CachedChatClient,
    ChatReply,
    ChatRequest,
    HTTPChatClient,
    LLMStatusError,
    LLMTimeoutError,
    LLMTransportError,
    llm_chat,
)
from .mock import MockChatClient
from .pipeline import (
    AugmentationError,
    AugmentationLog,
    AugmentedDataset,
    AugmentedItem,
    AugmentedUserProfile,
    PreconditionError,
    SequenceExpansion,
    augment_item,
    augment_user,
    expand_sequence,
    merge_expansion,
    run_privaugnet,
    sample_candidates,
)
from .prompts import ITEM_TEMPLATE, SEQUENCE_TEMPLATE, USER_TEMPLATE, PromptTemplate, TemplateError

__all__ = [
    "AugmentationError", "AugmentationLog", "AugmentedDataset", "AugmentedItem", "AugmentedUserProfile",
    "CachedChatClient", "ChatReply", "ChatRequest", "HTTPChatClient", "ITEM_TEMPLATE", "LLMStatusError",
    "LLMTimeoutError", "LLMTransportError", "MockChatClient", "PreconditionError", "PromptTemplate",
    "SEQUENCE_TEMPLATE", "SequenceExpansion", "TemplateError", "USER_TEMPLATE", "augment_item",
    "augment_user", "expand_sequence", "llm_chat", "merge_expansion", "run_privaugnet", "sample_candidates",
]
