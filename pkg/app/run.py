# app/run.py

import os

import uvicorn


def main():
    host = os.environ.get("BLENDQC_HOST", "0.0.0.0")
    port = int(os.environ.get("BLENDQC_PORT", "8000"))
    # no reload: a restart aborts running solves
    uvicorn.run("app.main:app", host=host, port=port, reload=False)
