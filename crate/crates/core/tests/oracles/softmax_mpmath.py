"""High-precision two-way softmax values for the scoring tests."""
import json
import sys

import mpmath

mpmath.mp.dps = 60

cases = [
    (0.30, 0.35, 100.0),
    (0.20, 0.20, 100.0),
    (0.25, 0.26, 4.6052),
    (-0.4, 0.1, 1.0),
    (0.31, 0.29, 100.0),
    (0.9, -0.9, 1000.0),
    (-1.0, 1.0, 50.0),
]
out = []
for cb, cm, s in cases:
    lb = mpmath.mpf(cb) * mpmath.mpf(s)
    lm = mpmath.mpf(cm) * mpmath.mpf(s)
    p_morph = 1 / (1 + mpmath.exp(lb - lm))
    out.append({"cos_bonafide": cb, "cos_morph": cm, "logit_scale": s,
                "p_morph": mpmath.nstr(p_morph, 25, min_fixed=-1000, max_fixed=1000) if p_morph > 1e-300 else "0",
                "p_bonafide": mpmath.nstr(1 - p_morph, 25)})
json.dump(out, sys.stdout, indent=1)
sys.stdout.write("\n")
