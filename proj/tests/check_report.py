"""Validate an acceptance report against the documented schema."""
import json
import sys

import jsonschema

report_path, schema_path = sys.argv[1], sys.argv[2]
with open(report_path) as f:
    report = json.load(f)
with open(schema_path) as f:
    schema = json.load(f)
jsonschema.validate(report, schema)

ids = sorted(c["id"] for c in report["criteria"])
if ids != list(range(1, 11)):
    sys.exit(f"criterion ids must be 1..10 exactly once, got {ids}")
if report["all_pass"] != all(c["pass"] for c in report["criteria"]):
    sys.exit("all_pass disagrees with the per-criterion flags")
print(f"{report_path}: valid, {len(ids)} criteria")
