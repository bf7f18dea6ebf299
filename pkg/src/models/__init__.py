from .database import Base, engine, SessionLocal
from .run_models import RunRecord, CurvePointRecord

__all__ = [
    'Base',
    'engine',
    'SessionLocal',
    'RunRecord',
    'CurvePointRecord',
]
