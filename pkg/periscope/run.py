"""
Entry point to run the FastAPI server.

Usage:
    python -m periscope.run
    python -m periscope serve --port 8000
"""

from typing import Optional

import uvicorn

from periscope.config import settings
from periscope.logs import setup_logging


def serve(host: Optional[str] = None, port: Optional[int] = None, reload: bool = False) -> None:
    """Run the uvicorn server."""
    uvicorn.run(
        "periscope.api:app",
        host=host or settings.HOST,
        port=port or settings.PORT,
        reload=reload,
        log_config=None,
    )


def main():
    setup_logging(settings.LOG_LEVEL, json_output=settings.LOG_JSON)
    serve(reload=True)


if __name__ == "__main__":
    main()
