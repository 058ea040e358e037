"""Run the service: python -m embed_service (port from EMBED_PORT, default 8091)."""

import os

import uvicorn

from .app import create_app


def main() -> None:
    port = int(os.environ.get("EMBED_PORT", "8091"))
    uvicorn.run(create_app(), host="0.0.0.0", port=port, log_level="warning")


if __name__ == "__main__":
    main()
