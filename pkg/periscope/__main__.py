"""Allow running as: python -m periscope"""
import sys

from periscope.cli import main

sys.exit(main())
