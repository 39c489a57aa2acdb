"""A follower settling at a 0.5 s time headway behind a leader at 20 m/s."""
from sead import simulation as sim
from sead.catalogue import load_scenario

data = load_scenario("headway")
world = sim.World(data, sim.scenario_config(data))
while world.now < 60:
    world.step()
    if abs(world.now % 10) < 1e-6:
        gap = world.bodies["V0"].s - world.bodies["V1"].s
        print(f"t={world.now:5.1f} s  gap={gap:6.2f} m  follower speed={world.bodies['V1'].v:5.2f} m/s")
