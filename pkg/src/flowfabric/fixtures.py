"""Seven ready-to-run flow fixtures with synthetic data generators.

Each fixture mirrors a production processing pipeline shape: an x-ray
correlation pipeline (10 steps), serial-crystallography stills/refine/
publish pipelines (10/2/6), a ptychography reconstruction (3), a peak-
finding network trainer (4), and a diffraction-microscopy far-field
pipeline (8). Science codes are deterministic stubs that sleep a
configurable duration and write schema-correct synthetic products, so
end-to-end runs exercise real transfers, real catalog ingests, and real
event logs at desk scale.

Step durations follow the published per-flow runtime ratios; "tiny"
compresses them to milliseconds, "small" to 1/60.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import NotFound, ValidationFailed
from .model import (ActionState, ChoiceState, FlowDefinition, StateFragment,
                    ToolSpec, compose_flow, validate_flow)

FIXTURE_NAMES = ("XPCS", "SSX-Stills", "SSX-Prime", "SSX-Publish", "Ptycho", "BraggNN", "HEDM")

SCALES = {"tiny": 1.0 / 60000.0, "small": 1.0 / 60.0}

DATA_PROFILES = {
    # per fixture: scale -> (n_files, file_size_bytes)
    "XPCS": {"tiny": (1, 1 << 20), "small": (1, 16 << 20)},
    "SSX-Stills": {"tiny": (16, 4 << 10), "small": (512, 64 << 10)},
    "SSX-Prime": {"tiny": (1, 64 << 10), "small": (1, 1 << 20)},
    "SSX-Publish": {"tiny": (4, 64 << 10), "small": (16, 256 << 10)},
    "Ptycho": {"tiny": (4, 256 << 10), "small": (8, 4 << 20)},
    "BraggNN": {"tiny": (4, 64 << 10), "small": (16, 1 << 20)},
    "HEDM": {"tiny": (4, 128 << 10), "small": (16, 2 << 20)},
}


class UnknownFixture(NotFound):
    code = "UnknownFixture"


@dataclass(frozen=True)
class ProviderUrls:
    transfer: str
    compute: str
    search: str
    review: str


@dataclass(frozen=True)
class Fixture:
    name: str
    flow: FlowDefinition
    tools: tuple[ToolSpec, ...]
    expected_steps: tuple[tuple[str, str], ...]  # (action_kind, label)
    functions: tuple[dict[str, Any], ...]        # compute function specs to register
    data_profile: dict[str, tuple[int, int]]

    def step_kinds(self) -> list[str]:
        return [kind for kind, _label in self.expected_steps]


def _fn(name: str, op: str, duration_s: float) -> dict[str, Any]:
    return {"name": name, "kind": "builtin-stub",
            "payload": {"stub": "science", "op": op, "duration_s": round(duration_s, 6)}}


def _fn_id(spec: dict[str, Any]) -> str:
    from .compute import function_from_doc

    return function_from_doc(spec).function_id


def _transfer_tool(label: str, source_collection: str, source_path: str,
                   destination_collection: str, destination_path: str,
                   urls: ProviderUrls, required: tuple[str, ...] = (), recursive: bool = True) -> ToolSpec:
    return ToolSpec(
        name=label, action_kind="transfer", required_input_keys=required,
        fragments=(StateFragment(label, "transfer", urls.transfer, {
            "source_collection": source_collection,
            "source_path": source_path,
            "destination_collection": destination_collection,
            "destination_path": destination_path,
            "recursive": recursive,
        }),))


def _scoped(args: dict[str, Any]) -> dict[str, Any]:
    """Products of concurrent runs must not collide: scope output dirs by a
    per-run input key."""
    if "output_root" in args and "output_scope" not in args:
        return {**args, "output_scope": "$.input.batch_scope"}
    return args


def _compute_tool(label: str, fn_spec: dict[str, Any], args: dict[str, Any],
                  urls: ProviderUrls, required: tuple[str, ...] = ()) -> ToolSpec:
    return ToolSpec(
        name=label, action_kind="compute", required_input_keys=required,
        fragments=(StateFragment(label, "compute", urls.compute, {
            "endpoint_id": "$.input.compute_endpoint_id",
            "function_id": _fn_id(fn_spec),
            "args": _scoped(args),
        }),))


def _ingest_fragment(label: str, subject: str, content: dict[str, Any], urls: ProviderUrls,
                     mode: str = "replace") -> StateFragment:
    params: dict[str, Any] = {"index_id": "$.input.search_index_id", "subject": subject,
                              "content": content}
    if mode != "replace":
        params["mode"] = mode
    return StateFragment(label, "search", urls.search, params)


BASE_KEYS = ("compute_endpoint_id", "transfer_source_collection_id",
             "transfer_destination_collection_id", "transfer_source_path",
             "transfer_destination_path")
BASE_KEY_DOCS = {
    "compute_endpoint_id": "compute endpoint that runs analysis functions",
    "transfer_source_collection_id": "collection holding the acquired data",
    "transfer_destination_collection_id": "collection on the analysis computer",
    "transfer_source_path": "batch path relative to the source collection",
    "transfer_destination_path": "staging path relative to the destination collection",
}


def _durations(raw: dict[str, float], scale: str) -> dict[str, float]:
    factor = SCALES[scale]
    return {k: max(0.001, v * factor) for k, v in raw.items()}


def build_fixture(name: str, urls: ProviderUrls, scale: str = "tiny",
                  with_acquire_nodes: bool = False) -> Fixture:
    if scale not in SCALES:
        raise ValidationFailed(f"scale must be one of {sorted(SCALES)}")
    builders: dict[str, Callable[..., Fixture]] = {
        "XPCS": _xpcs, "SSX-Stills": _ssx_stills, "SSX-Prime": _ssx_prime,
        "SSX-Publish": _ssx_publish, "Ptycho": _ptycho, "BraggNN": _braggnn, "HEDM": _hedm,
    }
    builder = builders.get(name)
    if builder is None:
        raise UnknownFixture(f"no fixture {name!r}; known: {', '.join(FIXTURE_NAMES)}")
    if name == "XPCS":
        return builder(urls, scale, with_acquire_nodes)
    return builder(urls, scale)


def _package(name: str, tools: list[ToolSpec], functions: list[dict[str, Any]],
             expected: list[tuple[str, str]]) -> Fixture:
    flow = compose_flow(tools, title=name)
    fixture = Fixture(name=name, flow=flow, tools=tuple(tools),
                      expected_steps=tuple(expected), functions=tuple(functions),
                      data_profile=DATA_PROFILES[name])
    got = [(flow.states[label].action_kind, label) for label in _linear_order(flow)]
    if got != list(expected):
        raise ValidationFailed(f"fixture {name}: step sequence {got} != expected {expected}")
    return fixture


def _linear_order(flow: FlowDefinition) -> list[str]:
    order = []
    cursor = flow.start_at
    while cursor is not None:
        order.append(cursor)
        state = flow.states[cursor]
        cursor = state.next if isinstance(state, ActionState) else None
    return order


# -- the seven fixtures -----------------------------------------------------------


def _xpcs(urls: ProviderUrls, scale: str, with_acquire_nodes: bool = False) -> Fixture:
    d = _durations({"extract": 10.0, "acquire": 1.0, "boost": 120.9, "plots": 20.0,
                    "plot_md": 17.0, "aggregate": 10.0}, scale)
    fns = {
        "extract": _fn("xpcs_extract_metadata", "extract_metadata", d["extract"]),
        "acquire": _fn("acquire_nodes", "acquire_nodes", d["acquire"]),
        "boost": _fn("xpcs_boost_corr", "boost_corr", d["boost"]),
        "plots": _fn("xpcs_make_plots", "make_plots", d["plots"]),
        "plot_md": _fn("xpcs_plot_metadata", "extract_metadata", d["plot_md"]),
        "aggregate": _fn("xpcs_gather_publication", "gather_metadata", d["aggregate"]),
    }
    tools = [
        _transfer_tool("TransferRaw", "$.input.transfer_source_collection_id",
                       "$.input.transfer_source_path",
                       "$.input.transfer_destination_collection_id",
                       "$.input.transfer_destination_path", urls, required=BASE_KEYS),
        _compute_tool("ExtractMetadata", fns["extract"], {
            "input_path": "$.input.transfer_destination_path",
            "output_root": "$.input.staging_root", "output_rel": "xpcs/metadata",
        }, urls, required=("staging_root", "batch_scope")),
        _transfer_tool("TransferMetadata", "$.input.transfer_destination_collection_id",
                       "$.ExtractMetadata.dir", "$.input.publish_collection_id",
                       "xpcs/metadata", urls, required=("publish_collection_id",)),
        ToolSpec(name="IngestMetadata", action_kind="search",
                 required_input_keys=("search_index_id", "dataset_subject"),
                 fragments=(_ingest_fragment("IngestMetadata", "$.input.dataset_subject", {
                     "stage": "preprocess", "metadata": "$.ExtractMetadata.metadata",
                 }, urls),)),
    ]
    expected = [("transfer", "TransferRaw"), ("compute", "ExtractMetadata"),
                ("transfer", "TransferMetadata"), ("search", "IngestMetadata")]
    if with_acquire_nodes:
        tools.append(_compute_tool("AcquireNodes", fns["acquire"], {}, urls))
        expected.append(("compute", "AcquireNodes"))
    tools.extend([
        _compute_tool("BoostCorr", fns["boost"], {
            "input_path": "$.input.transfer_destination_path",
            "output_root": "$.input.staging_root", "output_rel": "xpcs/proc",
        }, urls),
        _compute_tool("MakePlots", fns["plots"], {
            "inputs": "$.BoostCorr.files",
            "output_root": "$.input.staging_root", "output_rel": "xpcs/plots",
        }, urls),
        _compute_tool("ExtractPlotMetadata", fns["plot_md"], {
            "inputs": "$.MakePlots.plots",
            "output_root": "$.input.staging_root", "output_rel": "xpcs/plot-md",
        }, urls),
        _compute_tool("AggregatePublication", fns["aggregate"], {
            "inputs": ["$.BoostCorr.digest", "$.MakePlots.digest", "$.ExtractPlotMetadata.digest"],
            "output_root": "$.input.staging_root", "output_rel": "xpcs/publication",
        }, urls),
        _transfer_tool("TransferResults", "$.input.transfer_destination_collection_id",
                       "$.AggregatePublication.dir", "$.input.publish_collection_id",
                       "xpcs/publication", urls),
        ToolSpec(name="IngestResults", action_kind="search", required_input_keys=(),
                 fragments=(_ingest_fragment("IngestResults", "$.input.dataset_subject", {
                     "stage": "published",
                     "aggregated": "$.AggregatePublication.metadata",
                     "plots": "$.MakePlots.plots",
                 }, urls, mode="merge"),)),
    ])
    expected.extend([
        ("compute", "BoostCorr"), ("compute", "MakePlots"), ("compute", "ExtractPlotMetadata"),
        ("compute", "AggregatePublication"), ("transfer", "TransferResults"),
        ("search", "IngestResults"),
    ])
    functions = list(fns.values()) if with_acquire_nodes else [v for k, v in fns.items() if k != "acquire"]
    return _package("XPCS", tools, functions, expected)


def _ssx_stills(urls: ProviderUrls, scale: str) -> Fixture:
    d = _durations({"confirm": 20.0, "config": 30.0, "dials": 600.0, "extract": 80.0,
                    "viz": 80.0, "gather": 50.0}, scale)
    fns = {
        "confirm": _fn("ssx_confirm_inputs", "confirm_inputs", d["confirm"]),
        "config": _fn("ssx_create_config", "create_config", d["config"]),
        "dials": _fn("dials_stills", "dials_stills", d["dials"]),
        "extract": _fn("ssx_extract_hits", "extract_metadata", d["extract"]),
        "viz": _fn("ssx_visualize_hits", "make_plots", d["viz"]),
        "gather": _fn("ssx_gather_publication", "gather_metadata", d["gather"]),
    }
    tools = [
        _transfer_tool("TransferIn", "$.input.transfer_source_collection_id",
                       "$.input.transfer_source_path",
                       "$.input.transfer_destination_collection_id",
                       "$.input.transfer_destination_path", urls, required=BASE_KEYS),
        _compute_tool("ConfirmInputs", fns["confirm"], {
            "input_path": "$.input.transfer_destination_path",
        }, urls),
        _compute_tool("CreateConfig", fns["config"], {
            "output_root": "$.input.staging_root", "output_rel": "ssx/config",
        }, urls, required=("staging_root", "batch_scope")),
        _compute_tool("DialsStills", fns["dials"], {
            "input_path": "$.input.transfer_destination_path",
            "hits": "$.input.hits_per_batch",
            "output_root": "$.input.staging_root", "output_rel": "ssx/stills",
        }, urls, required=("hits_per_batch",)),
        ToolSpec(name="HitAnalysis", action_kind="compute", required_input_keys=(),
                 fragments=(
                     StateFragment("ExtractHits", "compute", urls.compute, {
                         "endpoint_id": "$.input.compute_endpoint_id",
                         "function_id": _fn_id(fns["extract"]),
                         "args": _scoped({"inputs": "$.DialsStills.files",
                                          "output_root": "$.input.staging_root",
                                          "output_rel": "ssx/hit-md"}),
                     }),
                     StateFragment("VisualizeHits", "compute", urls.compute, {
                         "endpoint_id": "$.input.compute_endpoint_id",
                         "function_id": _fn_id(fns["viz"]),
                         "args": _scoped({"hits": "$.DialsStills.hits",
                                          "output_root": "$.input.staging_root",
                                          "output_rel": "ssx/viz"}),
                     }),
                 )),
        ToolSpec(name="PublishResults", action_kind="search",
                 required_input_keys=("search_index_id", "publish_collection_id", "dataset_subject"),
                 fragments=(
                     StateFragment("GatherPublication", "compute", urls.compute, {
                         "endpoint_id": "$.input.compute_endpoint_id",
                         "function_id": _fn_id(fns["gather"]),
                         "args": _scoped({"inputs": ["$.ExtractHits.digest", "$.VisualizeHits.digest"],
                                          "output_root": "$.input.staging_root",
                                          "output_rel": "ssx/publication"}),
                     }),
                     StateFragment("TransferMetadata", "transfer", urls.transfer, {
                         "source_collection": "$.input.transfer_destination_collection_id",
                         "source_path": "$.GatherPublication.dir",
                         "destination_collection": "$.input.publish_collection_id",
                         "destination_path": "ssx/publication",
                         "recursive": True,
                     }),
                     _ingest_fragment("IngestResults", "$.input.dataset_subject", {
                         "stage": "stills", "hits": "$.DialsStills.hits",
                         "batch": "$.input.transfer_source_path",
                     }, urls),
                 )),
        _transfer_tool("TransferBack", "$.input.transfer_destination_collection_id",
                       "$.GatherPublication.dir", "$.input.transfer_source_collection_id",
                       "processed/ssx", urls),
    ]
    expected = [("transfer", "TransferIn"), ("compute", "ConfirmInputs"),
                ("compute", "CreateConfig"), ("compute", "DialsStills"),
                ("compute", "ExtractHits"), ("compute", "VisualizeHits"),
                ("compute", "GatherPublication"), ("transfer", "TransferMetadata"),
                ("search", "IngestResults"), ("transfer", "TransferBack")]
    return _package("SSX-Stills", tools, list(fns.values()), expected)


def _ssx_prime(urls: ProviderUrls, scale: str) -> Fixture:
    d = _durations({"prime": 53.7}, scale)
    fn = _fn("prime_refine", "prime_refine", d["prime"])
    tools = [
        _compute_tool("PrimeRefine", fn, {
            "cumulative_hits": "$.input.cumulative_hits",
            "output_root": "$.input.staging_root", "output_rel": "ssx/prime",
        }, urls, required=("compute_endpoint_id", "staging_root", "batch_scope", "cumulative_hits")),
        _transfer_tool("TransferStructure", "$.input.transfer_destination_collection_id",
                       "$.PrimeRefine.dir", "$.input.transfer_source_collection_id",
                       "processed/prime", urls,
                       required=("transfer_source_collection_id",
                                 "transfer_destination_collection_id")),
    ]
    expected = [("compute", "PrimeRefine"), ("transfer", "TransferStructure")]
    return _package("SSX-Prime", tools, [fn], expected)


def _ssx_publish(urls: ProviderUrls, scale: str) -> Fixture:
    d = _durations({"gather": 100.0, "archive": 150.0, "hist": 56.2}, scale)
    fns = {
        "gather": _fn("publish_gather_results", "gather_metadata", d["gather"]),
        "archive": _fn("publish_archive", "archive", d["archive"]),
        "hist": _fn("publish_histograms", "histogram", d["hist"]),
    }
    tools = [
        _compute_tool("GatherResults", fns["gather"], {
            "input_path": "$.input.transfer_destination_path",
            "output_root": "$.input.staging_root", "output_rel": "publish/gathered",
        }, urls, required=BASE_KEYS + ("staging_root", "batch_scope")),
        _compute_tool("ArchiveData", fns["archive"], {
            "inputs": "$.GatherResults.files",
            "output_root": "$.input.staging_root", "output_rel": "publish/archive",
        }, urls),
        _compute_tool("MakeHistograms", fns["hist"], {
            "inputs": "$.GatherResults.files",
            "output_root": "$.input.staging_root", "output_rel": "publish/hist",
        }, urls),
        _transfer_tool("TransferPublication", "$.input.transfer_destination_collection_id",
                       "$.ArchiveData.dir", "$.input.publish_collection_id",
                       "ssx/archive", urls, required=("publish_collection_id",)),
        ToolSpec(name="IngestPublication", action_kind="search",
                 required_input_keys=("search_index_id", "dataset_subject"),
                 fragments=(_ingest_fragment("IngestPublication", "$.input.dataset_subject", {
                     "stage": "archive", "archive": "$.ArchiveData.archive_path",
                 }, urls),)),
        _transfer_tool("TransferBack", "$.input.transfer_destination_collection_id",
                       "$.MakeHistograms.dir", "$.input.transfer_source_collection_id",
                       "processed/publish", urls),
    ]
    expected = [("compute", "GatherResults"), ("compute", "ArchiveData"),
                ("compute", "MakeHistograms"), ("transfer", "TransferPublication"),
                ("search", "IngestPublication"), ("transfer", "TransferBack")]
    return _package("SSX-Publish", tools, list(fns.values()), expected)


def _ptycho(urls: ProviderUrls, scale: str) -> Fixture:
    d = _durations({"recon": 2259.4}, scale)
    fn = _fn("ptycho_reconstruct", "ptycho_recon", d["recon"])
    tools = [
        _transfer_tool("TransferIn", "$.input.transfer_source_collection_id",
                       "$.input.transfer_source_path",
                       "$.input.transfer_destination_collection_id",
                       "$.input.transfer_destination_path", urls, required=BASE_KEYS),
        _compute_tool("Reconstruct", fn, {
            "input_path": "$.input.transfer_destination_path",
            "output_root": "$.input.staging_root", "output_rel": "ptycho/recon",
        }, urls, required=("staging_root", "batch_scope")),
        _transfer_tool("TransferBack", "$.input.transfer_destination_collection_id",
                       "$.Reconstruct.dir", "$.input.transfer_source_collection_id",
                       "processed/ptycho", urls),
    ]
    expected = [("transfer", "TransferIn"), ("compute", "Reconstruct"),
                ("transfer", "TransferBack")]
    return _package("Ptycho", tools, [fn], expected)


def _braggnn(urls: ProviderUrls, scale: str) -> Fixture:
    d = _durations({"prepare": 40.0, "train": 122.1}, scale)
    fns = {
        "prepare": _fn("braggnn_prepare", "prepare_data", d["prepare"]),
        "train": _fn("braggnn_train", "train_model", d["train"]),
    }
    tools = [
        _transfer_tool("TransferIn", "$.input.transfer_source_collection_id",
                       "$.input.transfer_source_path",
                       "$.input.transfer_destination_collection_id",
                       "$.input.transfer_destination_path", urls, required=BASE_KEYS),
        _compute_tool("PrepareData", fns["prepare"], {
            "input_path": "$.input.transfer_destination_path",
            "output_root": "$.input.staging_root", "output_rel": "braggnn/prepared",
        }, urls, required=("staging_root", "batch_scope")),
        _compute_tool("TrainModel", fns["train"], {
            "inputs": "$.PrepareData.files",
            "output_root": "$.input.staging_root", "output_rel": "braggnn/model",
        }, urls),
        _transfer_tool("TransferModel", "$.input.transfer_destination_collection_id",
                       "$.TrainModel.dir", "$.input.transfer_source_collection_id",
                       "processed/braggnn", urls),
    ]
    expected = [("transfer", "TransferIn"), ("compute", "PrepareData"),
                ("compute", "TrainModel"), ("transfer", "TransferModel")]
    return _package("BraggNN", tools, list(fns.values()), expected)


def _hedm(urls: ProviderUrls, scale: str) -> Fixture:
    d = _durations({"peaks": 150.0, "extract": 50.0, "refine": 150.0, "gather": 55.9}, scale)
    fns = {
        "peaks": _fn("midas_peaksearch", "midas_peaksearch", d["peaks"]),
        "extract": _fn("hedm_extract_hits", "extract_metadata", d["extract"]),
        "refine": _fn("midas_refine", "midas_refine", d["refine"]),
        "gather": _fn("hedm_gather_metadata", "gather_metadata", d["gather"]),
    }
    tools = [
        _transfer_tool("TransferIn", "$.input.transfer_source_collection_id",
                       "$.input.transfer_source_path",
                       "$.input.transfer_destination_collection_id",
                       "$.input.transfer_destination_path", urls, required=BASE_KEYS),
        _compute_tool("PeakSearch", fns["peaks"], {
            "input_path": "$.input.transfer_destination_path",
            "output_root": "$.input.staging_root", "output_rel": "hedm/peaks",
        }, urls, required=("staging_root", "batch_scope")),
        _compute_tool("ExtractHitsViz", fns["extract"], {
            "inputs": "$.PeakSearch.files",
            "output_root": "$.input.staging_root", "output_rel": "hedm/hit-md",
        }, urls),
        _compute_tool("RefineStructure", fns["refine"], {
            "inputs": "$.PeakSearch.files",
            "output_root": "$.input.staging_root", "output_rel": "hedm/refined",
        }, urls),
        _compute_tool("GatherMetadata", fns["gather"], {
            "inputs": ["$.ExtractHitsViz.digest", "$.RefineStructure.digest"],
            "output_root": "$.input.staging_root", "output_rel": "hedm/publication",
        }, urls),
        _transfer_tool("TransferMetadata", "$.input.transfer_destination_collection_id",
                       "$.GatherMetadata.dir", "$.input.publish_collection_id",
                       "hedm/publication", urls, required=("publish_collection_id",)),
        ToolSpec(name="PublishResults", action_kind="search",
                 required_input_keys=("search_index_id", "dataset_subject"),
                 fragments=(_ingest_fragment("PublishResults", "$.input.dataset_subject", {
                     "stage": "hedm", "metadata": "$.GatherMetadata.metadata",
                 }, urls),)),
        _transfer_tool("TransferBack", "$.input.transfer_destination_collection_id",
                       "$.RefineStructure.dir", "$.input.transfer_source_collection_id",
                       "processed/hedm", urls),
    ]
    expected = [("transfer", "TransferIn"), ("compute", "PeakSearch"),
                ("compute", "ExtractHitsViz"), ("compute", "RefineStructure"),
                ("compute", "GatherMetadata"), ("transfer", "TransferMetadata"),
                ("search", "PublishResults"), ("transfer", "TransferBack")]
    return _package("HEDM", tools, list(fns.values()), expected)


def build_review_variant(urls: ProviderUrls, scale: str = "tiny") -> tuple[FlowDefinition, list[dict]]:
    """A review-gated publication flow: transfer, analyze, human review,
    then publish only on approval. A composition exercise for the review
    provider and conditional branching, not one of the seven fixtures."""
    d = _durations({"boost": 120.9}, scale)
    fn = _fn("xpcs_boost_corr", "boost_corr", d["boost"])
    flow = FlowDefinition(title="XPCS-Review", start_at="TransferRaw", states={
        "TransferRaw": ActionState(urls.transfer, "transfer", {
            "source_collection": "$.input.transfer_source_collection_id",
            "source_path": "$.input.transfer_source_path",
            "destination_collection": "$.input.transfer_destination_collection_id",
            "destination_path": "$.input.transfer_destination_path",
            "recursive": True,
        }, "$.TransferRaw", next="Analyze"),
        "Analyze": ActionState(urls.compute, "compute", {
            "endpoint_id": "$.input.compute_endpoint_id",
            "function_id": _fn_id(fn),
            "args": _scoped({"input_path": "$.input.transfer_destination_path",
                             "output_root": "$.input.staging_root", "output_rel": "review/proc"}),
        }, "$.Analyze", next="ReviewQuality"),
        "ReviewQuality": ActionState(urls.review, "review", {
            "prompt": "Inspect the correlation results before publication",
            "reviewers": "$.input.reviewers",
            "payload_refs": ["$.Analyze.dir"],
        }, "$.ReviewQuality", next="CheckVerdict"),
        "CheckVerdict": ChoiceState("$.ReviewQuality.decision", "==", "approve", "PublishResults", None),
        "PublishResults": ActionState(urls.search, "search", {
            "index_id": "$.input.search_index_id",
            "subject": "$.input.dataset_subject",
            "content": {"stage": "reviewed", "decision": "$.ReviewQuality.decision"},
        }, "$.PublishResults", end=True),
    }, input_schema={"required": list(BASE_KEYS) + [
        "staging_root", "batch_scope", "search_index_id", "dataset_subject", "reviewers"]})
    return validate_flow(flow), [fn]


# -- synthetic data -----------------------------------------------------------------


def generate_data(fixture_name: str, scale: str, dest_dir: Path, seed: int = 0,
                  n_files: int | None = None, file_size: int | None = None) -> dict[str, Any]:
    """Write deterministic synthetic acquisition files plus a manifest."""
    profile = DATA_PROFILES.get(fixture_name)
    if profile is None:
        raise UnknownFixture(f"no fixture {fixture_name!r}")
    count, size = profile[scale]
    count = n_files if n_files is not None else count
    size = file_size if file_size is not None else size
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    rng = random.Random(f"{fixture_name}|{scale}|{seed}")
    manifest = {"fixture": fixture_name, "scale": scale, "seed": seed, "files": []}
    for i in range(count):
        name = f"img_{i:05d}.raw"
        blob = rng.randbytes(size)
        (dest / name).write_bytes(blob)
        manifest["files"].append({
            "path": name, "size": size,
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    # manifest lives beside the batch dir so transfers move exactly the data files
    (dest.parent / f"{dest.name}.manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
