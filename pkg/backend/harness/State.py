from typing import Any, Dict, List, Optional

from typing_extensions import TypedDict


class PipelineState(TypedDict, total=False):
    config: Any
    instance: Any
    status: str
    error: Dict[str, Any]
    stages_done: List[str]
    equilibrium: Any
    planner: Any
    penalized: Any
    penalization_history: List[Dict[str, Any]]
    e: float
    target: Any
    calibration: Any
    trigger: Any
    e_N: float
    simulation: Any
    deviation: Any
    sweep: Any
    summary: Dict[str, Any]
    artifacts: List[str]
    report: Optional[str]
