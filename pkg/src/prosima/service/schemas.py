"""Request/response bodies for the HTTP service.

Every request that runs an experiment embeds optional experiment-config
overrides; the service resolves file config < inline overrides exactly like
the CLI does, so a request is reproducible from its JSON body alone.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- requests ---------------------------------------------------------------------

class FragmentRequest(StrictModel):
    image: str = Field(description="path to a PGM image")
    rows: int = 4
    cols: int = 4
    out_dir: str | None = Field(default=None, description="write shard PGMs here")


class AnchorRequest(StrictModel):
    deployment: str = Field(description="deployment directory to create or extend")
    config: dict = Field(default_factory=dict, description="experiment config overrides")
    config_file: str | None = None


class ReconstructRequest(StrictModel):
    deployment: str
    image_id: str | None = Field(default=None, description="anchored image to corrupt+restore")
    input_image: str | None = Field(default=None, description="PGM to restore as-is")
    sigma: float = 0.05
    noise_seed: int = 0
    alpha: float | None = None
    fallback: str | None = None
    output_image: str | None = None
    provenance_out: str | None = None


class VerifyRequest(StrictModel):
    deployment: str


class TopologyRequest(StrictModel):
    nodes: int = 20
    m0: int = 4
    m: int = 2
    seed: int = 0
    leader_fraction: float = 0.1
    out: str | None = None


class ConsensusSimRequest(StrictModel):
    P: int = 4
    f: int = 1
    rounds: int = 10
    txs_per_round: int = 16
    seed: int = 0
    faults: list[str] = Field(default_factory=list, description='entries like "1:crash"')
    config: dict = Field(default_factory=dict)
    config_file: str | None = None
    trace_out: str | None = None


class BenchRequest(StrictModel):
    config: dict = Field(default_factory=dict)
    config_file: str | None = None
    out_dir: str | None = None


# --- responses --------------------------------------------------------------------

class ShardInfo(StrictModel):
    row: int
    col: int
    key: str
    width: int
    height: int


class FragmentResponse(StrictModel):
    image_id: str
    rows: int
    cols: int
    shards: list[ShardInfo]
    written: list[str]


class AnchorImageReport(StrictModel):
    image_id: str
    root: str
    rounds: int


class AnchorResponse(StrictModel):
    deployment: str
    anchored: list[AnchorImageReport]
    scopes: int
    config_hash: str


class ShardProvenanceInfo(StrictModel):
    cell: list[int]
    scope: str
    height: int
    tx_id: str
    mode: str
    cosine: float
    verified: bool


class ReconstructResponse(StrictModel):
    image_id: str
    verified: bool
    metrics: dict[str, float]
    provenance: list[ShardProvenanceInfo]
    output_image: str | None
    provenance_out: str | None


class ScopeReport(StrictModel):
    ok: bool
    detail: str


class VerifyResponse(StrictModel):
    status: str  # "ok" | "failed" | "unavailable"
    percent: float | None
    checked: int
    passed: int
    detail: str | None = None
    scopes: dict[str, ScopeReport]


class TopologyResponse(StrictModel):
    nodes: int
    edges: int
    max_degree: int
    mean_degree: float
    leaders: list[int]
    connected: bool
    out: str | None


class ConsensusSimResponse(StrictModel):
    rounds: int
    committed_rounds: int
    aborted_rounds: int
    committed_txs: int
    conflicting_commits: int
    mean_total_ms: float
    trace_csv: str
    trace_out: str | None


class BenchTable4Response(StrictModel):
    rows: list[dict]
    csv_path: str | None
    config_hash: str


class BenchScaleResponse(StrictModel):
    batch_rows: list[dict]
    worker_rows: list[dict]
    fit_a: float
    fit_b: float
    r2: float
    phase1_speedup: float
    batches_csv: str | None
    workers_csv: str | None
    config_hash: str


class BenchRobustnessResponse(StrictModel):
    rows: list[dict]
    csv_path: str | None
    config_hash: str


class ErrorBody(StrictModel):
    error: str
    detail: str
