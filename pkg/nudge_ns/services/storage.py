from __future__ import annotations
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import logging
import os

from sqlalchemy import JSON, Column, DateTime, Float, Integer, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker


logger = logging.getLogger(__name__)

DB_URL_ENV = "NUDGE_NS_DB_URL"
Base = declarative_base()


def _now() -> datetime:
	return datetime.now(timezone.utc)


class RunRecord(Base):
	__tablename__ = "runs"
	id = Column(Integer, primary_key=True)
	name = Column(String, nullable=False)
	scheme = Column(String, nullable=False)
	mu = Column(Float, default=0.0)
	dt = Column(Float, nullable=False)
	status = Column(String, nullable=False, default="running")
	final_l2_error = Column(Float, nullable=True)
	output_dir = Column(String, nullable=False)
	message = Column(String, nullable=True)
	meta = Column(JSON)
	created_at = Column(DateTime, default=_now)
	finished_at = Column(DateTime, nullable=True)


def database_url(output_root: Union[str, Path]) -> str:
	url = os.getenv(DB_URL_ENV)
	if url:
		return url
	return f"sqlite:///{Path(output_root) / 'runs.db'}"


class RunRegistry:
	"""Book-keeping of every run: one row from start to final status."""

	def __init__(self, url: str) -> None:
		self.url = url
		self._engine = create_engine(url, future=True)
		Base.metadata.create_all(self._engine)
		self._Session = sessionmaker(bind=self._engine, autoflush=False, autocommit=False, future=True)

	@classmethod
	def for_output(cls, output_root: Union[str, Path]) -> "RunRegistry":
		Path(output_root).mkdir(parents=True, exist_ok=True)
		return cls(database_url(output_root))

	def start(self, name: str, scheme: str, mu: float, dt: float, output_dir: str,
			  metadata: Optional[Dict[str, Any]] = None) -> int:
		session = self._Session()
		try:
			rec = RunRecord(name=name, scheme=scheme, mu=mu, dt=dt, output_dir=output_dir, meta=metadata or {})
			session.add(rec)
			session.commit()
			session.refresh(rec)
			return rec.id
		finally:
			session.close()

	def finish(self, run_id: int, status: str, final_l2_error: Optional[float] = None,
			   message: Optional[str] = None) -> bool:
		session = self._Session()
		try:
			rec = session.get(RunRecord, run_id)
			if not rec:
				return False
			rec.status = status
			rec.final_l2_error = final_l2_error
			rec.message = message
			rec.finished_at = _now()
			session.commit()
			return True
		finally:
			session.close()

	def get(self, run_id: int) -> Optional[dict]:
		session = self._Session()
		try:
			rec = session.get(RunRecord, run_id)
			return _as_dict(rec) if rec else None
		finally:
			session.close()

	def list_runs(self, limit: int = 50) -> List[dict]:
		session = self._Session()
		try:
			rows = session.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit)
			return [_as_dict(r) for r in rows]
		finally:
			session.close()

	def dispose(self) -> None:
		self._engine.dispose()


def _as_dict(r: RunRecord) -> dict:
	return {
		"id": r.id,
		"name": r.name,
		"scheme": r.scheme,
		"mu": r.mu,
		"dt": r.dt,
		"status": r.status,
		"final_l2_error": r.final_l2_error,
		"output_dir": r.output_dir,
		"message": r.message,
		"metadata": r.meta,
		"created_at": r.created_at.isoformat() if r.created_at else None,
		"finished_at": r.finished_at.isoformat() if r.finished_at else None,
	}
