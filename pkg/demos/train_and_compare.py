"""Few-shot tuning of ReLLaX against its reduced variants on one seed.

Each variant shares the same frozen base LM and CRM. Only the adapters
(and for ReLLaX the soft-prompt projector) are trained. The zero-shot row
scores with untrained adapters, whose B = 0 leaves the base LM untouched.

Run: python demos/train_and_compare.py [output_dir]
Roughly three minutes on one core.
"""

import sys
import tempfile
import time
from dataclasses import asdict

from rellax.config import RunConfig
from rellax.pipeline import TrainConfig, build_rellax, evaluate, train_rellax
from rellax.workspace import Workspace

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="rellax-demo-")
ws = Workspace(out, RunConfig(seed=0))
train, test = ws.split()[0], ws.test_set()
print(f"train {len(train)}, test {len(test)}, CRM test AUC {ws.crm_test_auc():.4f}")

zero = evaluate(ws.system(), test)
print(f"\n{'variant':<12}{'AUC':>8}{'LogLoss':>9}{'ACC':>8}{'secs':>7}")
print(f"{'zero-shot':<12}{zero.auc:>8.4f}{zero.logloss:>9.4f}{zero.acc:>8.4f}{'':>7}")

base = {k: v for k, v in asdict(ws.train_config()).items() if k not in ("variant", "w_source", "spa", "subr")}
for variant in ("identity-W", "ilora", "rella", "rellax"):
    t0 = time.perf_counter()
    system = build_rellax(ws.lm(), ws.crm(), ws.template, TrainConfig.for_variant(variant, **base), ws.index()[0])
    train_rellax(system, train)
    rep = evaluate(system, test)
    print(f"{variant:<12}{rep.auc:>8.4f}{rep.logloss:>9.4f}{rep.acc:>8.4f}{time.perf_counter() - t0:>7.0f}")
