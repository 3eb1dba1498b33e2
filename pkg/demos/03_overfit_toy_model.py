"""Train the toy model on eight scenes until it memorises them (about half a minute)."""
# %%
import numpy as np

from relmo.data import SyntheticConfig, generate_scenes
from relmo.model import ModelConfig, init_params
from relmo.training import TrainConfig, evaluate, train

config = ModelConfig.toy()
scenes = generate_scenes(8, SyntheticConfig(N=2, T=4, P=2, J=3, seed=42))
print("trainable values:", init_params(config, 0).num_parameters())

# %% The zero-initialised decoder starts from "hold the last pose".
print("constant-pose MPJPE:", evaluate(scenes, init_params(config, 42), config)["mpjpe"])

# %% One step per epoch with all eight scenes in the batch.
tcfg = TrainConfig(lr=1e-3, decay_every=100, batch_size=8, epochs=2000, seed=42)
state = train(scenes, config, tcfg)
for row in state.epoch_log[::250] + state.epoch_log[-1:]:
    print(f"step {row['step']:5d}  lr {row['lr']:.2e}  loss {row['train_loss']:.3e}  MPJPE {row['mpjpe']:.4f}")

# %% Horizon reports as printed by the eval command.
res = evaluate(scenes, state.params, config)
print("\n".join(res["vim"].csv_rows() + res["mpjpe_report"].csv_rows()))
print("position share of the final loss:", np.round(state.step_log[-1]["loss_position"] / state.step_log[-1]["loss"], 3))
