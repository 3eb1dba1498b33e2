"""Switch off parts of the model and compare how well each variant fits (about a minute)."""
# %%
from relmo.data import Scene, SyntheticConfig, generate_scenes
from relmo.model import ModelConfig, forward, init_params
from relmo.training import TrainConfig, train

scenes = generate_scenes(8, SyntheticConfig(N=2, T=4, P=2, J=3, seed=42))
tcfg = TrainConfig(lr=1e-3, decay_every=100, batch_size=8, epochs=1000, seed=42)

# %% Without the inter-person branch, person 0 cannot see person 1 at all.
cfg = ModelConfig.toy(no_inter=True)
params = init_params(cfg, 0)
params["decoder.weight"].data[...] = 0.1
s = scenes[0]
moved = s.coords.copy()
moved[1] += 3.0
same = (forward(s, params, cfg).data[0] == forward(Scene(moved, s.T), params, cfg).data[0]).all()
print("person 0 unchanged when person 1 moves:", same)

# %% Final training MPJPE per variant.
variants = {
    "full": {},
    "positions instead of velocities": {"no_velocity_input": True},
    "concat instead of aggregation": {"no_iam": True},
    "no intra and no inter": {"no_intra": True, "no_inter": True},
}
for name, flags in variants.items():
    state = train(scenes, ModelConfig.toy(**flags), tcfg)
    print(f"{name:34s} {state.epoch_log[-1]['mpjpe']:.4f}")
