from .run_registry import RunRegistry
from .pipeline import ExperimentPipeline

__all__ = ['RunRegistry', 'ExperimentPipeline']
