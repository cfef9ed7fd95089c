import logging
from typing import Any, Dict

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from .config import RunConfig, RunMode
from .experiments import record_dicts, run_adaptive, run_apriori, run_reference, run_truncation

# Configure logging settings
logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(name)s - %(message)s")
logger = logging.getLogger(__name__)

# Initialize the FastAPI application
app = FastAPI(title="blendqc")

# Endpoint Specification:
# POST /runs - Accept the following data in the request body:
# - mode: string (reference, apriori, adaptive or truncation)
# - config: object (configuration sections, same keys as the TOML file)
#
# Returns the summary rows of the run: step, DoF, errors and estimators.
# GET /health - liveness check.


class RunRequest(BaseModel):
    mode: RunMode = Field(..., description="Which driver to run.")
    config: Dict[str, Any] = Field(default_factory=dict, description="Configuration sections.")

    @field_validator("config")
    def validate_config(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        """
        The mode is given once, at the top level of the request.
        """
        if "mode" in value:
            raise ValueError("Set the mode at the top level of the request, not inside config.")
        return value


def execute(config: RunConfig) -> Dict[str, Any]:
    if config.mode is RunMode.reference:
        reference = run_reference(config)
        return {"rows": [{"sites": reference.model.n_sites, "energy": reference.energy}]}
    if config.mode is RunMode.apriori:
        return {"rows": record_dicts(run_apriori(config))}
    if config.mode is RunMode.truncation:
        return {"rows": run_truncation(config)}
    records, result = run_adaptive(config)
    return {"rows": record_dicts(records), "stopped_reason": result.stopped_reason, "error": result.error}


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/runs")
def create_run(params: RunRequest):

    logger.info(f"Received {params.mode.value} run request.")
    logger.debug(f"Request parameters: {params}")

    try:
        config = RunConfig.model_validate({**params.config, "mode": params.mode})
    except ValueError as ve:
        logger.error(f"Invalid configuration: {ve}")
        raise HTTPException(status_code=400, detail=str(ve))

    try:
        summary = execute(config)
    except ValueError as ve:
        logger.error(f"ValueError in {config.mode.value} run: {ve}")
        raise HTTPException(status_code=400, detail=str(ve))
    except Exception as e:
        logger.error(f"Exception in {config.mode.value} run: {e}")
        raise HTTPException(status_code=500, detail=f"Internal Server Error: {str(e)}")

    logger.info(f"{config.mode.value} run completed with {len(summary['rows'])} rows.")
    return {"mode": config.mode.value, **summary}
