"""
Entry point for `python -m dpdpu`.
"""

from .dpdpu import app

if __name__ == "__main__":
    app(prog_name="dpdpu")
