import json
import logging
from pathlib import Path
from typing import List, Optional, Union

import pandas as pd
from sqlalchemy.orm import Session

from ..errors import StateError
from ..models.run_models import CurvePointRecord, RunRecord
from .evaluation import read_curve

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CURVE_FILES = {"lecomh": "curve_lecomh.csv", "deferral": "curve_deferral.csv"}


class RunRegistry:
    
    def __init__(self, db: Session):
        self.db = db
    
    def register_run(self, run_dir: Union[str, Path]) -> RunRecord:
        run_dir = Path(run_dir).resolve()
        manifest_path = run_dir / MANIFEST_NAME
        if not manifest_path.is_file():
            raise StateError(f"{run_dir} has no {MANIFEST_NAME}; the run has not finished")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        
        points = self._read_points(run_dir)
        lecomh = [p for p in points if p.method == "lecomh"]
        best = max((p.accuracy for p in (lecomh or points)), default=None)
        
        run = self.db.query(RunRecord).filter(RunRecord.directory == str(run_dir)).first()
        if run is None:
            run = RunRecord(directory=str(run_dir))
            self.db.add(run)
        run.name = run_dir.name
        run.config_hash = manifest["config_hash"]
        run.hard_eval = str(manifest.get("hard_eval", ""))
        run.started_at = manifest.get("started_at")
        run.finished_at = manifest.get("finished_at")
        run.best_accuracy = best
        run.points = points
        
        self.db.commit()
        self.db.refresh(run)
        logger.info("registered run %s with %d curve points", run.name, len(points))
        return run
    
    def _read_points(self, run_dir: Path) -> List[CurvePointRecord]:
        points = []
        for method, filename in CURVE_FILES.items():
            path = run_dir / filename
            if not path.is_file():
                continue
            for p in read_curve(path):
                points.append(CurvePointRecord(
                    method=method,
                    lambda_=p.lambda_,
                    coverage=p.coverage,
                    mean_cost=p.mean_cost,
                    accuracy=p.accuracy,
                    accuracy_std=p.accuracy_std,
                    trials=p.trials,
                ))
        baselines = run_dir / "baselines.csv"
        if baselines.is_file():
            for row in pd.read_csv(baselines, float_precision="round_trip").itertuples(index=False):
                points.append(CurvePointRecord(
                    method=row.name,
                    coverage=float(row.coverage),
                    mean_cost=float(row.cost),
                    accuracy=float(row.accuracy),
                ))
        return points
    
    def scan(self, directory: Union[str, Path]) -> List[RunRecord]:
        root = Path(directory)
        if not root.is_dir():
            raise StateError(f"{root} is not a directory")
        return [self.register_run(d) for d in sorted(root.iterdir()) if (d / MANIFEST_NAME).is_file()]
    
    def list_runs(self, skip: int = 0, limit: int = 100) -> List[RunRecord]:
        return self.db.query(RunRecord).order_by(RunRecord.id).offset(skip).limit(limit).all()
    
    def get_run(self, run_id: int) -> Optional[RunRecord]:
        return self.db.query(RunRecord).filter(RunRecord.id == run_id).first()
    
    def get_curve(self, run_id: int, method: Optional[str] = None) -> List[CurvePointRecord]:
        query = self.db.query(CurvePointRecord).filter(CurvePointRecord.run_id == run_id)
        if method:
            query = query.filter(CurvePointRecord.method == method)
        return query.order_by(CurvePointRecord.method, CurvePointRecord.coverage).all()
    
    def delete_run(self, run_id: int) -> bool:
        run = self.get_run(run_id)
        if run is None:
            return False
        self.db.delete(run)
        self.db.commit()
        return True
