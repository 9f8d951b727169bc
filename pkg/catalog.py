import logging
from datetime import datetime, timezone

import pandas as pd
from sqlalchemy import Column, DateTime, Float, Integer, String, create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker

Base = declarative_base()

# ==========================================
# 1. INGESTED CLIPS (The "What")
# ==========================================

class Clip(Base):
    __tablename__ = 'clips'
    source_id = Column(String(200), primary_key=True)
    path = Column(String(500))
    pitch = Column(Integer)
    family = Column(String(50))
    split = Column(String(10))  # train | test


# ==========================================
# 2. EVALUATION HISTORY (The "How good")
# ==========================================

class MetricRun(Base):
    """One row per `evaluate` invocation."""
    __tablename__ = 'metric_runs'

    # row_id alone is the primary key so repeated evaluations of one checkpoint coexist
    row_id = Column(Integer, primary_key=True, autoincrement=True)
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    checkpoint = Column(String(500))
    label = Column(String(50))     # generated | reference
    duration = Column(Float)
    n_samples = Column(Integer)
    pis = Column(Float)
    iis = Column(Float)
    kid = Column(Float)
    fad = Column(Float)
    embedder_fingerprint = Column(String(64))


# ==========================================
# INITIALIZATION
# ==========================================

def init_db(db_url):
    engine = create_engine(db_url)
    Base.metadata.create_all(engine)
    logging.debug(f"Catalog schema ready at {db_url}")
    return engine


def get_existing_clips(engine, split=None):
    """source_ids already registered, so `prepare` only processes new files."""
    Session = sessionmaker(bind=engine)
    with Session() as session:
        query = session.query(Clip.source_id)
        if split:
            query = query.filter(Clip.split == split)
        try:
            return {row.source_id for row in query}
        except SQLAlchemyError:
            return set()


def register_clips(engine, manifest, split):
    Session = sessionmaker(bind=engine)
    with Session() as session:
        for entry in manifest:
            session.merge(Clip(source_id=entry.source_id, path=entry.path, pitch=int(entry.pitch),
                               family=entry.family, split=split))
        session.commit()
    logging.info(f"Catalog: {len(manifest)} {split} clips registered.")


def record_metrics(engine, report, checkpoint, label='generated'):
    Session = sessionmaker(bind=engine)
    with Session() as session:
        session.add(MetricRun(checkpoint=str(checkpoint), label=label, duration=report.duration,
                              n_samples=report.n_samples, pis=report.pis, iis=report.iis,
                              kid=report.kid, fad=report.fad,
                              embedder_fingerprint=report.embedder_fingerprint))
        session.commit()


def metric_history(engine):
    try:
        return pd.read_sql("SELECT * FROM metric_runs ORDER BY row_id", engine)
    except SQLAlchemyError:
        return pd.DataFrame()
