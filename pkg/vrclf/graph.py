from typing import Any, Dict, List, Optional, TypedDict
import asyncio
import logging
import time

from langgraph.graph import END, StateGraph

from vrclf.errors import VRCLFError
from vrclf.reaction_network import (
    CstrInstance, DilutionLaw, check_cstr_conditions, check_hypotheses, check_w_bounds, stabilize,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class ReactorState(TypedDict, total=False):
    """State carried through the reactor pipeline"""
    instance: CstrInstance
    samples: int
    seed: int
    synthesize: bool

    # Stage results
    hypotheses_result: Dict
    spec_result: Dict
    w_bounds_result: Dict
    conditions_result: Dict
    law: Optional[DilutionLaw]

    # Status tracking
    current_stage: str
    passed: bool
    errors: List[str]
    start_time: float
    end_time: float
    duration: float


class ReactorGraph:
    """
    LangGraph workflow for one reactor: hypotheses, VRCLF data, the W
    sandwich, the sampled conditions and, when everything passes, synthesis
    of the dilution law.
    """

    def __init__(self):
        self.graph = self._build_graph()

    def _build_graph(self):
        workflow = StateGraph(ReactorState)

        workflow.add_node("hypotheses", self._run_hypotheses)
        workflow.add_node("spec", self._run_spec)
        workflow.add_node("w_bounds", self._run_w_bounds)
        workflow.add_node("conditions", self._run_conditions)
        workflow.add_node("synthesis", self._run_synthesis)

        workflow.set_entry_point("hypotheses")
        workflow.add_conditional_edges("hypotheses", self._can_continue, {True: "spec", False: END})
        workflow.add_conditional_edges("spec", self._can_continue, {True: "w_bounds", False: END})
        workflow.add_edge("w_bounds", "conditions")
        workflow.add_conditional_edges("conditions", self._should_synthesize, {True: "synthesis", False: END})
        workflow.add_edge("synthesis", END)

        return workflow.compile()

    def _fail(self, state: ReactorState, stage: str, e: Exception) -> None:
        logger.error(f"{stage} stage error: {e}")
        state["errors"].append(f"{stage}: {e}")
        state["passed"] = False

    async def _run_hypotheses(self, state: ReactorState) -> ReactorState:
        logger.info("Checking network hypotheses")
        state["current_stage"] = "hypotheses"
        inst = state["instance"]
        try:
            report = await asyncio.to_thread(check_hypotheses, inst.net, inst.cons,
                                             samples=min(state["samples"], 20000))
            state["hypotheses_result"] = report.to_dict()
            if not report.passed:
                state["errors"].append("hypotheses: sampled network hypotheses fail")
                state["passed"] = False
        except VRCLFError as e:
            self._fail(state, "hypotheses", e)
        return state

    async def _run_spec(self, state: ReactorState) -> ReactorState:
        logger.info("Building VRCLF data in log coordinates")
        state["current_stage"] = "spec"
        inst = state["instance"]
        try:
            spec = await asyncio.to_thread(lambda: inst.spec)
            state["spec_result"] = {
                "k": spec.k,
                "epsilon": spec.epsilon,
                "r": spec.r,
                "gains": spec.gains.to_dict(),
                "params": inst.cfg.params,
            }
        except VRCLFError as e:
            self._fail(state, "spec", e)
        return state

    async def _run_w_bounds(self, state: ReactorState) -> ReactorState:
        state["current_stage"] = "w_bounds"
        try:
            report = await asyncio.to_thread(check_w_bounds, state["instance"])
            state["w_bounds_result"] = report.to_dict()
            if not report.passed:
                state["passed"] = False
        except VRCLFError as e:
            self._fail(state, "w_bounds", e)
        return state

    async def _run_conditions(self, state: ReactorState) -> ReactorState:
        logger.info("Checking reactor conditions")
        state["current_stage"] = "conditions"
        try:
            report = await asyncio.to_thread(check_cstr_conditions, state["instance"],
                                             state["samples"], state["seed"])
            state["conditions_result"] = report.to_dict()
            if not report.passed:
                state["passed"] = False
        except VRCLFError as e:
            self._fail(state, "conditions", e)
        return state

    async def _run_synthesis(self, state: ReactorState) -> ReactorState:
        logger.info("Synthesizing dilution law")
        state["current_stage"] = "synthesis"
        try:
            state["law"] = await asyncio.to_thread(stabilize, state["instance"], False)
        except VRCLFError as e:
            self._fail(state, "synthesis", e)
        return state

    def _can_continue(self, state: ReactorState) -> bool:
        return not state["errors"]

    def _should_synthesize(self, state: ReactorState) -> bool:
        return state.get("synthesize", False) and state.get("passed", True) and not state["errors"]

    async def run(self, instance: CstrInstance, samples: int = 100000, seed: int = 0,
                  synthesize: bool = True) -> ReactorState:
        state: ReactorState = {
            "instance": instance,
            "samples": samples,
            "seed": seed,
            "synthesize": synthesize,
            "law": None,
            "passed": True,
            "errors": [],
            "start_time": time.time(),
        }
        try:
            result = await self.graph.ainvoke(state)
        except Exception as e:
            logger.error(f"Graph execution error: {e}")
            state["errors"].append(f"graph: {e}")
            state["passed"] = False
            result = state
        result["end_time"] = time.time()
        result["duration"] = result["end_time"] - result["start_time"]
        return result


def summarize(state: ReactorState) -> Dict[str, Any]:
    """JSON-ready view of a finished pipeline state"""
    keys = ("hypotheses_result", "spec_result", "w_bounds_result", "conditions_result")
    summary = {key: state[key] for key in keys if key in state}
    summary.update({
        "passed": bool(state.get("passed")) and not state.get("errors"),
        "errors": list(state.get("errors", [])),
        "synthesized": state.get("law") is not None,
        "duration": state.get("duration"),
    })
    return summary
