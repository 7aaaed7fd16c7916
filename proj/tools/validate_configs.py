"""Validate the example configurations against their JSON Schemas."""

import json
import pathlib
import sys

import jsonschema
from referencing import Registry, Resource

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCHEMAS = ROOT / "schemas"
CONFIGS = ROOT / "configs"

ASSIGNMENT = {
    "urban.json": "scenario",
    "urban_short.json": "scenario",
    "heavy.json": "scenario",
    "estimate_gaussian.json": "run",
    "estimate_cauchy.json": "run",
    "estimate_mh_mpma.json": "run",
    "sweep_kernels.json": "sweep",
    "train_nlos.json": "train_nlos",
    "fit_gmm.json": "fit_gmm",
    "report.json": "report",
}


def main() -> int:
    schemas = {p.name: json.loads(p.read_text()) for p in SCHEMAS.glob("*.schema.json")}
    registry = Registry().with_resources((name, Resource.from_contents(s)) for name, s in schemas.items())
    failures = 0
    for config in sorted(CONFIGS.glob("*.json")):
        kind = ASSIGNMENT.get(config.name)
        if kind is None:
            print(f"{config.name}: no schema assigned")
            failures += 1
            continue
        validator = jsonschema.Draft202012Validator(schemas[f"{kind}.schema.json"], registry=registry)
        errors = sorted(validator.iter_errors(json.loads(config.read_text())), key=lambda e: list(e.path))
        for e in errors:
            print(f"{config.name}: {'/'.join(map(str, e.path)) or '<root>'}: {e.message}")
        failures += bool(errors)
        if not errors:
            print(f"{config.name}: ok ({kind})")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
