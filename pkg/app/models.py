"""Database models for the run registry."""
from datetime import datetime
from flask_sqlalchemy import SQLAlchemy
import json

db = SQLAlchemy()


class RunManifest(db.Model):
    """Model for one CLI invocation, written before training starts."""

    __tablename__ = 'run_manifests'

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(32), nullable=False)  # 'pretrain', 'finetune', 'sweep', 'analyze'
    config_hash = db.Column(db.String(64), nullable=False)
    seed = db.Column(db.Integer)
    code_version = db.Column(db.String(32))
    input_paths = db.Column(db.Text)  # JSON array
    output_paths = db.Column(db.Text)  # JSON array
    status = db.Column(db.String(20), default='running')  # 'running', 'finished', 'failed'
    error_message = db.Column(db.Text)
    started_at = db.Column(db.DateTime, default=datetime.utcnow)
    finished_at = db.Column(db.DateTime)

    # Relationships
    results = db.relationship('RunResult', backref='manifest', lazy=True, cascade='all, delete-orphan')

    def set_input_paths(self, paths):
        """Store input paths as JSON."""
        self.input_paths = json.dumps([str(p) for p in paths])

    def get_input_paths(self):
        """Retrieve input paths from JSON."""
        return json.loads(self.input_paths) if self.input_paths else []

    def set_output_paths(self, paths):
        """Store output paths as JSON."""
        self.output_paths = json.dumps([str(p) for p in paths])

    def get_output_paths(self):
        """Retrieve output paths from JSON."""
        return json.loads(self.output_paths) if self.output_paths else []

    def to_dict(self):
        """Convert manifest to dictionary."""
        return {
            'id': self.id,
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'code_version': self.code_version,
            'input_paths': self.get_input_paths(),
            'output_paths': self.get_output_paths(),
            'status': self.status,
            'error_message': self.error_message,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None
        }

    def __repr__(self):
        return f'<RunManifest {self.id}: {self.command} {self.config_hash[:12]} ({self.status})>'


class RunResult(db.Model):
    """Model for one per-seed test metric of a method."""

    __tablename__ = 'run_results'

    id = db.Column(db.Integer, primary_key=True)
    manifest_id = db.Column(db.Integer, db.ForeignKey('run_manifests.id'), nullable=False)
    method = db.Column(db.String(64), nullable=False)
    task = db.Column(db.String(32), nullable=False)
    k = db.Column(db.Integer, nullable=False)
    seed = db.Column(db.Integer, nullable=False)
    metric = db.Column(db.Float)
    dev_metric = db.Column(db.Float)
    config = db.Column(db.Text)  # JSON object with the selected hyper-parameters
    split_checksum = db.Column(db.String(64))
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def set_config(self, config_dict):
        """Store the selected config as JSON."""
        self.config = json.dumps(config_dict, sort_keys=True)

    def get_config(self):
        """Retrieve the selected config from JSON."""
        return json.loads(self.config) if self.config else {}

    @classmethod
    def from_entry(cls, manifest, entry):
        """Build a row from a harness RunEntry."""
        result = cls(manifest=manifest, method=entry.method, task=entry.task, k=entry.k,
                     seed=entry.seed, metric=entry.metric, dev_metric=entry.dev_metric,
                     split_checksum=entry.split_checksum)
        result.set_config(entry.config)
        return result

    def to_dict(self):
        """Convert result to dictionary."""
        return {
            'id': self.id,
            'manifest_id': self.manifest_id,
            'method': self.method,
            'task': self.task,
            'k': self.k,
            'seed': self.seed,
            'metric': self.metric,
            'dev_metric': self.dev_metric,
            'config': self.get_config(),
            'split_checksum': self.split_checksum,
            'created_at': self.created_at.isoformat() if self.created_at else None
        }

    def __repr__(self):
        return f'<RunResult {self.id}: {self.method} {self.task} K={self.k} seed={self.seed} - {self.metric}>'
