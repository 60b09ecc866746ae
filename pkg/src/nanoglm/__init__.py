"""nanoglm: a desk-scale dialogue LLM stack.

Adapter fine-tuning (LoRA, prefix tuning), INT4 group-quantized inference,
nucleus sampling, retrieval-augmented prompting, corpus tooling, and a
streaming chat service — every numeric procedure covered by property tests
and small-instance oracles.
"""

from importlib import resources as _resources
from pathlib import Path as _Path

__version__ = "0.1.0"


def data_path(name: str) -> _Path:
    """Path to a bundled data file (toy library, template, toy corpus)."""
    return _Path(str(_resources.files("nanoglm") / "data" / name))


TOY_LIBRARY = "toy_library.json"
TOY_QA_CORPUS = "toy_qa.jsonl"
PROMPT_TEMPLATE = "prompt_template.txt"
