import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from .config import database_url
from .manifest import RunManifest
from .scheduler import TraceRecord

logger = logging.getLogger(__name__)

Base = declarative_base()


def _now():
    return datetime.now(timezone.utc)


class RunRecord(Base):
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    layout_id = Column(String(255), nullable=False)
    seed = Column(Integer, nullable=False)
    mode = Column(String(20), nullable=False)
    run_dir = Column(String(1000))
    manifest = Column(Text, nullable=False)  # JSON of the RunManifest
    created_at = Column(DateTime, default=_now)


class TraceRow(Base):
    __tablename__ = 'trace_rows'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False)
    t = Column(Integer, nullable=False)
    stage = Column(String(20), nullable=False)
    loss = Column(Float)
    grad_norm = Column(Float)
    diagnostics = Column(Text)  # JSON: pair overlaps, taus, ious


class RunStore:
    """Registry of guide runs and their traces on DATABASE_URL"""

    def __init__(self, url: Optional[str] = None):
        url = url or database_url()
        self.engine = create_engine(url)
        Base.metadata.create_all(self.engine)
        Session = sessionmaker(bind=self.engine)
        self.session = Session()
        logger.debug("run store on %s", self.engine.url.render_as_string(hide_password=True))

    def add_run(self, manifest: RunManifest, run_dir: Optional[str] = None) -> int:
        """Store a run manifest and return the run id"""
        run = RunRecord(
            layout_id=manifest.layout_id,
            seed=manifest.seed,
            mode=manifest.mode,
            run_dir=run_dir,
            manifest=json.dumps(manifest.to_dict(), sort_keys=True),
        )
        self.session.add(run)
        self.session.commit()
        return run.id

    def add_trace(self, run_id: int, records: Sequence[TraceRecord]) -> int:
        """Store a run's trace, one row per timestep"""
        for record in records:
            self.session.add(TraceRow(
                run_id=run_id,
                t=record.t,
                stage=record.stage,
                loss=record.loss,
                grad_norm=record.grad_norm,
                diagnostics=json.dumps({
                    'pair_overlaps': record.pair_overlaps,
                    'taus': record.taus,
                    'ious': record.ious,
                }),
            ))
        self.session.commit()
        return len(records)

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        """Get one run with its manifest decoded"""
        run = self.session.query(RunRecord).filter_by(id=run_id).first()
        if not run:
            return None
        return self._run_dict(run)

    def list_runs(self, layout_id: Optional[str] = None) -> List[Dict[str, Any]]:
        """All runs, newest first, optionally for one layout"""
        query = self.session.query(RunRecord)
        if layout_id:
            query = query.filter_by(layout_id=layout_id)
        return [self._run_dict(run) for run in query.order_by(RunRecord.id.desc()).all()]

    def get_trace(self, run_id: int) -> List[TraceRecord]:
        """Trace records of a run in execution order (descending t)"""
        rows = self.session.query(TraceRow).filter_by(run_id=run_id).order_by(TraceRow.t.desc()).all()
        result = []
        for row in rows:
            diagnostics = json.loads(row.diagnostics) if row.diagnostics else {}
            result.append(TraceRecord(
                t=row.t,
                stage=row.stage,
                loss=row.loss,
                grad_norm=row.grad_norm,
                pair_overlaps=diagnostics.get('pair_overlaps', {}),
                taus=diagnostics.get('taus', []),
                ious=diagnostics.get('ious', []),
            ))
        return result

    @staticmethod
    def _run_dict(run: RunRecord) -> Dict[str, Any]:
        return {
            'id': run.id,
            'layout_id': run.layout_id,
            'seed': run.seed,
            'mode': run.mode,
            'run_dir': run.run_dir,
            'manifest': json.loads(run.manifest),
            'created_at': run.created_at,
        }

    def close(self):
        """Close database session"""
        self.session.close()
        self.engine.dispose()
