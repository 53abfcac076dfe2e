"""Persistence: code specs, run manifests, and result files.

Spec files are versioned JSON with an explicit schema id and a sha256
content hash over the canonical payload (sorted keys, compact separators).
Index sets are stored as sorted integer lists.  Identical constructions
serialize to identical bytes.

Result files (CSV and JSON) carry a manifest id computed from the command,
configuration, seed and library version, never from wall-clock values, so a
re-run with the same manifest produces bit-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import HashError, VersionError
from .gaussian_lattice import PartitionChain
from .polar_engine import CodeSpec
from .test_channel import TestChannelParams

CODESPEC_SCHEMA = "polarq-codespec-v1"
NESTEDSPEC_SCHEMA = "polarq-nestedspec-v1"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def payload_hash(payload) -> str:
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def _params_payload(p: TestChannelParams) -> dict:
    return dict(sigma_s=p.sigma_s, delta=p.delta, sigma_r=p.sigma_r,
                alpha=p.alpha, sigma_tilde=p.sigma_tilde)


def _params_from(payload: dict) -> TestChannelParams:
    return TestChannelParams(**payload)


def _chain_payload(c: PartitionChain) -> dict:
    return dict(eta=c.eta, r=c.r, sigma_r=c.sigma_r)


def spec_payload(spec: CodeSpec) -> dict:
    return dict(
        schema=CODESPEC_SCHEMA,
        n=spec.n,
        seed=spec.seed,
        params=_params_payload(spec.params),
        chain=_chain_payload(spec.chain),
        levels=[
            dict(
                frozen=[int(v) for v in spec.frozen[l]],
                info=[int(v) for v in spec.info[l]],
                shaping=[int(v) for v in spec.shaping[l]],
                frozen_values=[int(v) for v in spec.frozen_values[l]],
            )
            for l in range(spec.r)
        ],
        meta=spec.meta,
    )


def spec_from_payload(payload: dict) -> CodeSpec:
    if payload.get("schema") != CODESPEC_SCHEMA:
        raise VersionError(f"unsupported spec schema {payload.get('schema')!r}")
    chain = PartitionChain(**payload["chain"])
    return CodeSpec(
        n=payload["n"],
        params=_params_from(payload["params"]),
        chain=chain,
        frozen=[np.array(l["frozen"], dtype=int) for l in payload["levels"]],
        info=[np.array(l["info"], dtype=int) for l in payload["levels"]],
        shaping=[np.array(l["shaping"], dtype=int) for l in payload["levels"]],
        frozen_values=[np.array(l["frozen_values"], dtype=np.uint8) for l in payload["levels"]],
        seed=payload["seed"],
        meta=payload.get("meta", {}),
    )


def spec_hash(spec) -> str:
    """Content hash of a CodeSpec or NestedSpec."""
    if isinstance(spec, CodeSpec):
        return payload_hash(spec_payload(spec))
    return payload_hash(_nested_payload(spec))


def save_spec(spec, path) -> None:
    """Write a CodeSpec or NestedSpec with schema id and content hash."""
    if isinstance(spec, CodeSpec):
        payload = spec_payload(spec)
    else:
        payload = _nested_payload(spec)
    doc = dict(payload=payload, hash=payload_hash(payload))
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_spec(path):
    """Load a saved spec; schema and hash are verified."""
    with open(path) as fh:
        doc = json.load(fh)
    payload = doc.get("payload", {})
    if payload_hash(payload) != doc.get("hash"):
        raise HashError(f"content hash mismatch in {path}")
    schema = payload.get("schema")
    if schema == CODESPEC_SCHEMA:
        return spec_from_payload(payload)
    if schema == NESTEDSPEC_SCHEMA:
        return _nested_from_payload(payload)
    raise VersionError(f"unsupported spec schema {schema!r}")


def _nested_payload(nested) -> dict:
    from .nested_schemes import NestedSpec  # local import; nested imports engine only

    assert isinstance(nested, NestedSpec)
    return dict(
        schema=NESTEDSPEC_SCHEMA,
        flavor=nested.flavor,
        scheme=dict(nested.scheme_params),
        fine=spec_payload(nested.fine),
        coarse=spec_payload(nested.coarse),
        levels=[
            dict(
                sc_decode=[int(v) for v in nested.sc_decode[l]],
                two_phase=[int(v) for v in nested.two_phase[l]],
                message=[int(v) for v in nested.message[l]],
                preshared_values=[int(v) for v in nested.preshared_values[l]],
                preshared=[int(v) for v in nested.preshared[l]],
            )
            for l in range(nested.r)
        ],
        seed=nested.seed,
    )


def _nested_from_payload(payload: dict):
    from .nested_schemes import NestedSpec

    fine = spec_from_payload(payload["fine"])
    coarse = spec_from_payload(payload["coarse"])
    return NestedSpec(
        flavor=payload["flavor"],
        scheme_params=payload["scheme"],
        fine=fine,
        coarse=coarse,
        sc_decode=[np.array(l["sc_decode"], dtype=int) for l in payload["levels"]],
        two_phase=[np.array(l["two_phase"], dtype=int) for l in payload["levels"]],
        message=[np.array(l["message"], dtype=int) for l in payload["levels"]],
        preshared=[np.array(l["preshared"], dtype=int) for l in payload["levels"]],
        preshared_values=[np.array(l["preshared_values"], dtype=np.uint8) for l in payload["levels"]],
        seed=payload["seed"],
    )


# ---------------------------------------------------------------------------
# Manifests and result files
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Provenance record for one CLI run."""

    command: str
    config: dict
    master_seed: int
    version: str = __version__
    wall_clock_s: float = 0.0
    result_files: list = field(default_factory=list)

    @property
    def manifest_id(self) -> str:
        ident = dict(command=self.command, config=self.config,
                     master_seed=self.master_seed, version=self.version)
        return payload_hash(ident)[:16]

    def save(self, path) -> None:
        doc = dict(
            command=self.command, config=self.config, master_seed=self.master_seed,
            version=self.version, wall_clock_s=self.wall_clock_s,
            result_files=list(self.result_files), manifest_id=self.manifest_id,
        )
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_results(rows: list[dict], fmt: str, path, columns=None, manifest_ref="") -> None:
    """Write result rows as CSV or JSON with a stable column order.

    Floats are rendered at 17 significant digits in both formats so the two
    carry identical numbers.  ``manifest_ref`` records the producing
    manifest id.
    """
    if columns is None:
        columns = sorted({k for row in rows for k in row}) if rows else []
    if fmt == "csv":
        buf = _stdio.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# manifest=" + manifest_ref])
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
    elif fmt == "json":
        doc = dict(
            manifest=manifest_ref,
            columns=list(columns),
            rows=[{c: _fmt(row.get(c, "")) for c in columns} for row in rows],
        )
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
