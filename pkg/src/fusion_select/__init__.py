"""
Fusion Select - experiment-selector CV-TMLE for augmenting an RCT control arm
with real-world control datasets
"""

from loguru import logger

__version__ = "0.1.0"

# Library code stays quiet unless the application opts in (see cli.configure_logging).
logger.disable("fusion_select")
