from sqlalchemy import Column, Integer, String, Float, DateTime, ForeignKey
from sqlalchemy.orm import relationship
from datetime import datetime

from .database import Base

class RunRecord(Base):
    __tablename__ = "runs"
    
    id = Column(Integer, primary_key=True, index=True)
    name = Column(String, nullable=False)
    directory = Column(String, unique=True, index=True, nullable=False)
    config_hash = Column(String, index=True, nullable=False)
    hard_eval = Column(String)
    started_at = Column(String)
    finished_at = Column(String)
    best_accuracy = Column(Float)
    registered_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)
    
    points = relationship(
        "CurvePointRecord",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="CurvePointRecord.id",
    )

class CurvePointRecord(Base):
    __tablename__ = "curve_points"
    
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    method = Column(String, nullable=False)
    lambda_ = Column("lambda", Float, nullable=True)
    coverage = Column(Float, nullable=False)
    mean_cost = Column(Float, nullable=False)
    accuracy = Column(Float, nullable=False)
    accuracy_std = Column(Float, default=0.0)
    trials = Column(Integer, default=1)
    
    run = relationship("RunRecord", back_populates="points")
