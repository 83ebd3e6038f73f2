"""Run a small experiment through the harness and show the report bundle."""
import json
import os
import tempfile
from pathlib import Path

from sandsink import harness

os.environ.setdefault(harness.OUTPUT_ENV, tempfile.mkdtemp(prefix="sandsink-"))
rep = harness.run({"experiment": "E3", "params": {"volumes": [[3], [2, 2], [2, 3]]}, "seed": 1})
print((rep.out_dir / "summary.txt").read_text())
man = json.loads(Path(rep.out_dir, "manifest.json").read_text())
print("status:", man["status"], "exit code:", rep.exit_code)
for f in man["files"]:
    print(f"  {f['path']:<24} {f['sha256'][:16]}")
