"""Progressive ST-GCN search for skeleton action recognition.

Submodules are imported on demand so that the command-line entry point can
set thread limits before numpy loads.
"""

__version__ = "0.1.0"
