"""Runtime context recorded in every run manifest."""

import platform
import subprocess
from pathlib import Path

import numpy as np
import torch


def detect_os() -> str:
    """Detect the current operating system."""
    system = platform.system().lower()

    if system == "darwin":
        return "macos"
    if system in ("linux", "windows"):
        return system
    return "unknown"


def detect_device() -> str:
    """Best available torch device; runs stay on CPU unless told otherwise."""
    if torch.cuda.is_available():
        return f"cuda ({torch.cuda.get_device_name(0)})"
    return "cpu"


def detect_git_revision(directory: str | None = None) -> str | None:
    """Commit of the working tree, or None outside a git checkout."""
    try:
        completed = subprocess.run(
            ["git", "rev-parse", "HEAD"],  # noqa: S607
            cwd=directory or Path.cwd(),
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return completed.stdout.strip() or None


def get_run_context() -> dict[str, str | None]:
    """Get the software and hardware context of the current process."""
    return {
        "os": detect_os(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "device": detect_device(),
        "threads": str(torch.get_num_threads()),
        "git": detect_git_revision(),
        "cwd": str(Path.cwd()),
    }


def format_context_info(context: dict[str, str | None]) -> str:
    """Format context information for display."""
    parts = []

    if context.get("os"):
        parts.append(f"OS: {context['os']}")

    if context.get("torch"):
        parts.append(f"torch: {context['torch']}")

    if context.get("device"):
        parts.append(f"Device: {context['device']}")

    return " | ".join(parts) if parts else "No context detected"
