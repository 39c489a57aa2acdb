"""Run the nominal case, then drop each message or expire each wait once. Compare what happens with what the verifier predicts."""
import sys
from collections import Counter

from sead import mdl, simulation as sim, verification
from sead.catalogue import builtin_registry, load_scenario

name = sys.argv[1] if len(sys.argv) > 1 else "leave"
data = load_scenario(name)
cfg = sim.scenario_config(data)
behaviours = mdl.compile_registry(builtin_registry())

seen = Counter()
for faults in [sim.Faults()] + sim.fault_matrix(data, cfg):
    result = sim.World(data, cfg, faults=faults).run()
    assert result.quiescent and sim.all_stable(result.world)
    for action, step, res, states in result.outcomes():
        seen[(action, step, str(res), tuple(sorted(states.items())))] += 1

action = next(iter(seen))[0]
predicted = verification.enumerate_outcomes(behaviours.manoeuvre(action))
print(f"{name}: {sum(seen.values())} runs, {len(predicted)} predicted endings")
for o in sorted(predicted, key=repr):
    states = tuple(sorted((r, s.value) for r, s in o.states))
    hits = seen.get((action, o.step, str(o.result), states), 0)
    print(f"  {o.step:<10} {str(o.result):<14} {dict(states)}  seen {hits}x")
