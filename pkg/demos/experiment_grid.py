"""Run the offline scripted grid, then build the report tables from the saved records."""
import tempfile
from pathlib import Path

from dlmlab.experiment import emit_report, load_config, load_records, run_experiment

config = load_config(Path(__file__).resolve().parent.parent / "configs" / "prompt1_scripted.yaml")
with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    records = run_experiment(config, out)
    for r in records:
        f = r["fairness"]
        print(r["cell"], r["final_expression"], "acceptable", f["acceptable"], "success", f["overall_success"])
    again = run_experiment(config, out, resume=True)
    print("resume reused", len(again), "records")
    for path in emit_report(load_records(out), out / "report"):
        print("wrote", path.name)
    print((out / "report" / "acceptable_rates.md").read_text())
