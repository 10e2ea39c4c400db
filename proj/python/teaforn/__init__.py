"""TeaForN seq2seq training lab: Python bindings over the C++ core."""

from ._core import (
    ContractError,
    Model,
    ParameterError,
    TokenIndexError,
    bleu,
    default_config,
    discount_weights,
    evaluate,
    generate_task,
    parse_key_values,
    rouge,
    token_accuracy,
    train,
)

PAD, GO, EOS, UNK = 0, 1, 2, 3

__all__ = [
    "ContractError",
    "Model",
    "ParameterError",
    "TokenIndexError",
    "bleu",
    "default_config",
    "discount_weights",
    "evaluate",
    "generate_task",
    "parse_key_values",
    "rouge",
    "token_accuracy",
    "train",
    "PAD",
    "GO",
    "EOS",
    "UNK",
]
