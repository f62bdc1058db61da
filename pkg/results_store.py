"""
Results Store Module
SQLAlchemy-backed ledger of runs and their metric rows

Every CLI invocation with --store records one run (keyed by its config
fingerprint) and the metric rows it produced, so results from many grids and
sweeps can be queried together. Any SQLAlchemy URL works; the default is a
local SQLite file.
"""

import logging
import math
from datetime import datetime
from typing import Any, Dict, List, Optional

import pandas as pd
from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from config import GFFM_RESULTS_DB

logger = logging.getLogger(__name__)

# SQLAlchemy setup - creates the base class for all ledger models
Base = declarative_base()


class RunRow(Base):
    """
    One recorded invocation

    Fields:
    - fingerprint: config fingerprint (primary key)
    - command: CLI subcommand that produced the metrics
    - config_text: canonical run config
    - created_at: when the run was recorded
    """
    __tablename__ = 'runs'

    fingerprint = Column(String(64), primary_key=True)
    command = Column(String(32), nullable=False)
    config_text = Column(Text, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)


class MetricRow(Base):
    """One metrics row; columns absent from a given harness stay null"""
    __tablename__ = 'metrics'

    id = Column(Integer, primary_key=True, autoincrement=True)
    fingerprint = Column(String(64), ForeignKey('runs.fingerprint'), nullable=False, index=True)
    training = Column(String(32), nullable=True)
    cfg_infer = Column(Boolean, nullable=True)
    nfe = Column(Integer, nullable=True)
    seed = Column(Integer, nullable=True)
    w = Column(Float, nullable=True)
    sg = Column(Boolean, nullable=True)
    sw2 = Column(Float, nullable=True)
    misclass_rate = Column(Float, nullable=True)
    forward_count = Column(Integer, nullable=True)
    wall_clock = Column(Float, nullable=True)
    diverged = Column(Boolean, nullable=False, default=False)


_METRIC_FIELDS = ("training", "cfg_infer", "nfe", "seed", "w", "sg", "sw2", "misclass_rate",
                  "forward_count", "wall_clock", "diverged")


def _clean(key: str, value: Any) -> Any:
    """Convert a DataFrame cell into a column value (NaN becomes null)"""
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    if key in ("cfg_infer", "sg", "diverged"):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes")
        return bool(value)
    if key in ("nfe", "seed", "forward_count"):
        return int(value)
    if key in ("w", "sw2", "misclass_rate", "wall_clock"):
        return float(value)
    return str(value)


class ResultsStore:
    """
    Results ledger

    Storage failures are logged and reported through return values
    (False / 0 / empty list); they never propagate to the caller.
    """

    def __init__(self, url: Optional[str] = None):
        """
        Args:
            url: SQLAlchemy URL; defaults to GFFM_RESULTS_DB
        """
        self.url = url or GFFM_RESULTS_DB
        self.engine = create_engine(self.url)
        self.Session = sessionmaker(bind=self.engine)
        Base.metadata.create_all(self.engine)
        logger.info(f"Results store ready at {self.url}")

    def record_run(self, fingerprint: str, command: str, config_text: str) -> bool:
        """
        Store a run, replacing any earlier run with the same fingerprint and
        its metric rows

        Returns:
            bool: True if stored
        """
        session = self.Session()
        try:
            session.query(MetricRow).filter(MetricRow.fingerprint == fingerprint).delete()
            session.query(RunRow).filter(RunRow.fingerprint == fingerprint).delete()
            session.add(RunRow(fingerprint=fingerprint, command=command, config_text=config_text))
            session.commit()
            logger.info(f"Recorded run {fingerprint} ({command})")
            return True
        except Exception as e:
            logger.error(f"Error recording run {fingerprint}: {e}")
            session.rollback()
            return False
        finally:
            session.close()

    def record_metrics(self, fingerprint: str, frame: pd.DataFrame) -> int:
        """
        Store every row of a metrics DataFrame under a recorded run

        Returns:
            int: number of rows stored (0 on failure)
        """
        session = self.Session()
        try:
            rows = []
            for record in frame.to_dict(orient='records'):
                values = {k: _clean(k, record.get(k)) for k in _METRIC_FIELDS}
                values['diverged'] = bool(values['diverged'])
                rows.append(MetricRow(fingerprint=fingerprint, **values))
            session.add_all(rows)
            session.commit()
            logger.info(f"Stored {len(rows)} metric rows for {fingerprint}")
            return len(rows)
        except Exception as e:
            logger.error(f"Error storing metrics for {fingerprint}: {e}")
            session.rollback()
            return 0
        finally:
            session.close()

    def get_metrics(self, fingerprint: str) -> List[Dict[str, Any]]:
        """Metric rows of one run in insertion order"""
        session = self.Session()
        try:
            rows = session.query(MetricRow).filter(MetricRow.fingerprint == fingerprint).order_by(MetricRow.id).all()
            return [{k: getattr(row, k) for k in _METRIC_FIELDS} for row in rows]
        except Exception as e:
            logger.error(f"Error reading metrics for {fingerprint}: {e}")
            return []
        finally:
            session.close()

    def count_runs(self) -> int:
        session = self.Session()
        try:
            return session.query(RunRow).count()
        except Exception as e:
            logger.error(f"Error counting runs: {e}")
            return 0
        finally:
            session.close()

    def close(self):
        """Dispose of the engine's connection pool"""
        self.engine.dispose()
        logger.info("Results store closed")
