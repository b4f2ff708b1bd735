"""``python -m mvdlab synth|pretrain|distill|eval|analyze ...``"""
from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
