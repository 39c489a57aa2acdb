"""Walk through a tail join: the request, the move, the attach, then the same join with the radio switched off."""
from sead import simulation as sim
from sead.catalogue import load_scenario


def show(title, result):
    print(f"== {title}")
    for m in result.trace.messages():
        print(f"  {m['kind']:>4} {m['action']:<10} {m['sender']} -> {', '.join(m['receivers'])}")
    for row in result.summary():
        print(f"  result {row['result']} after {row['duration']:.1f} s with {row['messages']} messages")
    print("  platoons:", result.world.platoons())
    print("  idle states:", {k: v.value for k, v in result.world.idle_states().items()})


data = load_scenario("join_tail")
show("nominal join", sim.World(data, sim.scenario_config(data)).run())
show("every message lost", sim.World(data, sim.scenario_config(data, {"drop": 1.0}), seed=1).run())
