"""Versioned prompt assets for the distillation and evaluation agents.

Each prompt file starts with a bracketed tag line; backends (notably the
deterministic mock) classify requests by that tag.
"""

from __future__ import annotations

from importlib import resources

QUESTION_TAG = "[granary-agent question v1]"
ANSWER_TAG = "[granary-agent answer v1]"
REWRITE_TAG = "[granary-agent rewrite v1]"
EVAL_TAG = "[granary-agent eval v1]"


def _load(name: str) -> str:
    return resources.files("granary").joinpath(f"assets/prompts/{name}").read_text(
        encoding="utf-8"
    )


QUESTION_PROMPT = _load("question_v1.txt")
ANSWER_PROMPT = _load("answer_v1.txt")
REWRITE_PROMPT = _load("rewrite_v1.txt")
EVAL_PROMPT = _load("eval_v1.txt")

QUESTION_USER_TEMPLATE = "Passage id: {node_id}\nVariation: {sample_idx}\n\n{node_text}\n"
ANSWER_USER_TEMPLATE = "{node_text}\n\nQuestion: {question}\n"
REWRITE_USER_TEMPLATE = (
    "<question>{question}</question>\n<solution>{solution}</solution>\n\n"
    "Passage:\n{node_text}\n"
)
