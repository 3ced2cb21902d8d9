"""Application entry point.

Usage:
    flask --app run pretrain --config configs/pretrain.json
    python run.py finetune --checkpoint runs/pretrain/pretrained.ckpt --method dart --k 16
"""
import os

from flask.cli import FlaskGroup

from app import create_app


def _create():
    return create_app(os.getenv('DART_ENV', 'default'))


app = _create()
cli = FlaskGroup(create_app=_create, add_default_commands=False)


if __name__ == '__main__':
    cli()
