from typing import Any, Dict, Mapping

import numpy as np
import torch

MAX_VALUE_CHARS = 200


def summarize_value(value: Any) -> Any:
    """
    Reduce arrays and tensors to a short descriptive string.

    Args:
        value: Any value passed as log context

    Returns:
        A compact representation suitable for a single log line
    """
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()

    if isinstance(value, np.ndarray):
        if value.size == 0:
            return f"array(shape={value.shape}, empty)"
        if value.size == 1:
            return value.reshape(-1)[0].item()
        if np.issubdtype(value.dtype, np.number):
            return (
                f"array(shape={value.shape}, min={np.min(value):.4g}, "
                f"max={np.max(value):.4g})"
            )
        return f"array(shape={value.shape}, dtype={value.dtype})"

    if isinstance(value, float):
        return float(f"{value:.6g}")

    if isinstance(value, Mapping):
        return {key: summarize_value(item) for key, item in value.items()}

    if isinstance(value, (list, tuple)) and len(value) > 8:
        return f"{type(value).__name__}(len={len(value)})"

    return value


def summarize_context(context: Dict[str, Any]) -> Dict[str, Any]:
    return {key: summarize_value(value) for key, value in context.items()}


def format_log_message(message: str, **kwargs: Any) -> str:
    """
    Append summarised keyword context to a log message.

    Args:
        message: Base log message
        **kwargs: Additional context to include (arrays are summarised)

    Returns:
        Message formatted as "message | key: value | key: value"
    """
    if not kwargs:
        return message

    context_parts = []
    for key, value in summarize_context(kwargs).items():
        value_str = str(value)
        if len(value_str) > MAX_VALUE_CHARS:
            value_str = value_str[:MAX_VALUE_CHARS] + "..."
        context_parts.append(f"{key}: {value_str}")

    return f"{message} | {' | '.join(context_parts)}"
