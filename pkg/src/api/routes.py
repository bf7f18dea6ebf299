from fastapi import APIRouter, Depends, HTTPException
from sqlalchemy.orm import Session
from typing import List, Optional
from pydantic import BaseModel, ConfigDict, Field

from ..errors import LecomhError
from ..models.database import get_db
from ..services.run_registry import RunRegistry

router = APIRouter()

class CurvePointOut(BaseModel):
    model_config = ConfigDict(from_attributes=True, populate_by_name=True)
    
    method: str
    lambda_: Optional[float] = Field(None, serialization_alias="lambda")
    coverage: float
    mean_cost: float
    accuracy: float
    accuracy_std: float
    trials: int

class RunOut(BaseModel):
    model_config = ConfigDict(from_attributes=True)
    
    id: int
    name: str
    directory: str
    config_hash: str
    hard_eval: Optional[str] = None
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    best_accuracy: Optional[float] = None

class ScanRequest(BaseModel):
    directory: str

def _get_or_404(registry: RunRegistry, run_id: int):
    run = registry.get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run

@router.get("/api/runs", response_model=List[RunOut])
def list_runs(skip: int = 0, limit: int = 100, db: Session = Depends(get_db)):
    return RunRegistry(db).list_runs(skip=skip, limit=limit)

@router.get("/api/runs/{run_id}", response_model=RunOut)
def get_run(run_id: int, db: Session = Depends(get_db)):
    return _get_or_404(RunRegistry(db), run_id)

@router.get("/api/runs/{run_id}/curve", response_model=List[CurvePointOut], response_model_by_alias=True)
def get_curve(run_id: int, method: Optional[str] = None, db: Session = Depends(get_db)):
    registry = RunRegistry(db)
    _get_or_404(registry, run_id)
    return registry.get_curve(run_id, method)

@router.post("/api/runs/scan", response_model=List[RunOut])
def scan_runs(request: ScanRequest, db: Session = Depends(get_db)):
    try:
        return RunRegistry(db).scan(request.directory)
    except (LecomhError, OSError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))

@router.delete("/api/runs/{run_id}")
def delete_run(run_id: int, db: Session = Depends(get_db)):
    if not RunRegistry(db).delete_run(run_id):
        raise HTTPException(status_code=404, detail="Run not found")
    return {"message": f"Run {run_id} deleted successfully"}
