import logging
from typing import Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from backend.harness.artifact_store import to_plain
from backend.harness.ExperimentConfig import ExperimentConfig
from backend.harness.selftest import selftest
from backend.harness.WorkflowManager import run_pipeline

logger = logging.getLogger(__name__)

load_dotenv()

app = FastAPI(title="folklab")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

CONFLICT_ERRORS = {"EmptyPayoffBand", "BracketError"}


def _status_code(state: dict) -> int:
    if state.get("status") == "empty-band":
        return 409
    kind = (state.get("error") or {}).get("type")
    if kind == "ConfigurationError":
        return 422
    if kind in CONFLICT_ERRORS:
        return 409
    return 500


def _run(config: ExperimentConfig, command: str) -> dict:
    try:
        state = run_pipeline(config, command)
    except Exception as e:
        logger.exception(f"{command} failed before any stage ran")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")
    body = to_plain({
        "status": state.get("status"),
        "output_dir": config.output_dir,
        "stages": state.get("stages_done", []),
        "summary": state.get("summary", {}),
        "error": state.get("error"),
        "artifacts": state.get("artifacts", []),
    })
    if state.get("status") != "ok":
        raise HTTPException(status_code=_status_code(state), detail=body)
    return body


@app.post("/mfg")
def mfg(config: ExperimentConfig):
    return _run(config, "mfg")


@app.post("/planner")
def planner(config: ExperimentConfig):
    return _run(config, "planner")


@app.post("/penalized")
def penalized(config: ExperimentConfig, n: Optional[float] = None):
    if n is not None:
        if n <= 0:
            raise HTTPException(status_code=422, detail="n must be positive")
        config = config.model_copy(update={"n_penalization": n})
    return _run(config, "penalized")


@app.post("/target")
def target(config: ExperimentConfig):
    return _run(config, "target")


@app.post("/calibrate")
def calibrate(config: ExperimentConfig):
    return _run(config, "calibrate")


@app.post("/simulate")
def simulate(config: ExperimentConfig):
    return _run(config, "simulate")


@app.post("/deviate")
def deviate(config: ExperimentConfig):
    return _run(config, "deviate")


@app.post("/sweep-n")
def sweep_n(config: ExperimentConfig):
    return _run(config, "sweep-n")


@app.post("/pipeline")
def pipeline(config: ExperimentConfig):
    return _run(config, "pipeline")


@app.post("/selftest")
def run_selftest(corrupt: Optional[str] = None):
    try:
        report = selftest(corrupt=corrupt)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return {"passed": report.passed, "failed": report.failed, "summary": report.summary()}


@app.get("/")
async def root():
    return {"message": "folklab ergodic MFG laboratory"}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8001)
