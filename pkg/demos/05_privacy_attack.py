# Presence-disclosure attack against the generated cohort.
#
# Attacker model: they hold a set of real records and claim "was in the
# training set" whenever some synthetic record reproduces a known record's
# visits exactly (order-insensitive multiset match -- the stronger attacker).
# We give them 50% actual members, so sensitivity/precision near or below
# 0.5 means the synthetic release leaks nothing beyond the prior.

import sys

from ehrgen import evaluation as ev
from ehrgen.corpus import load_cohort
from ehrgen.generator import GenerationRequest, generate_cohort
from ehrgen.model import TrainedModel
from ehrgen.simulate import default_toy_spec, simulate_toy_cohort

try:
    model = TrainedModel.load("demos/output/eva_toy.npz")
    train_cohort = load_cohort("demos/output/toy_cohort.jsonl")
except FileNotFoundError:
    sys.exit("run demos/01_simulate_and_inspect.py and demos/02_train_unconditional.py first")

synth = generate_cohort(model, GenerationRequest(count=2000, seed=7))

# fresh draws from the same population = records that were NOT trained on
outsiders = simulate_toy_cohort(default_toy_spec(n_records=200), seed=404)
known = [(r, True) for r in train_cohort.records[:200]] \
      + [(r, False) for r in outsiders.records]

out = ev.presence_disclosure(synth, known)
print(f"known records: {out.tp + out.fn} members + {out.fp + out.tn} outsiders")
print(f"claims: {out.tp + out.fp} (tp={out.tp} fp={out.fp})")
print(f"sensitivity {out.sensitivity:.3f}   precision {out.precision:.3f}")

claims = out.tp + out.fp
if claims == 0:
    print("attacker matched nothing: no training record was memorized verbatim")
elif claims < 10:
    print(f"(only {claims} claim(s) -- precision over so few is noise; "
          "sensitivity is the number to watch)")

# sanity check that the metric itself can detect leakage: attack the
# training data with itself and sensitivity jumps to 1
leak = ev.presence_disclosure(train_cohort, known)
print(f"upper bound (synthetic := training data): sensitivity {leak.sensitivity:.3f} precision {leak.precision:.3f}")
