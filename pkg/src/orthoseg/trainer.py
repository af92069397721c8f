"""Training procedure: Nesterov-momentum SGD, plateau-driven step decay and
the fine-tuning phase transitions (momentum escalation, noiserate decay,
staged encoder unfreezing), with bit-exact checkpoint resume.

Schedule rules:
  * every plateau divides the learning rate by 10;
  * the first plateau switches to the fine-tuning phase and raises momentum;
  * each later plateau multiplies noiserates by 0.75 (encoder), 0.375
    (decoder and additional residual blocks) and 0.25 (SCCB);
  * the first fine-tuning plateau unfreezes primary encoder block 2, the
    next one block 1.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .errors import NumericalError, OrthosegError
from .network import Model, NoiseRates

PHASE_INITIAL = "initial"
PHASE_FINE_TUNING = "fine_tuning"

NOISE_DECAY_ENCODER = 0.75
NOISE_DECAY_DECODER = 0.375
NOISE_DECAY_SCCB = 0.25


@dataclass
class PlateauTracker:
    """Fires when the validation loss has not improved for a full window."""

    window: int = 25000
    threshold: float = 1e-6
    best_loss: float = math.inf
    best_iteration: int = 0

    def check(self, iteration, val_loss):
        if val_loss < self.best_loss - self.threshold:
            self.best_loss = val_loss
            self.best_iteration = iteration
            return False
        if iteration - self.best_iteration >= self.window:
            self.best_iteration = iteration
            return True
        return False

    def to_dict(self):
        return {"window": self.window, "threshold": self.threshold,
                "best_loss": self.best_loss, "best_iteration": self.best_iteration}

    @classmethod
    def from_dict(cls, d):
        return cls(window=d["window"], threshold=d["threshold"],
                   best_loss=d["best_loss"], best_iteration=d["best_iteration"])


@dataclass
class TrainState:
    model: Model
    velocities: dict
    lr: float
    momentum: float
    fine_tuning_momentum: float
    noiserates: NoiseRates
    tracker: PlateauTracker
    noise_rng: np.random.Generator
    seed: int
    iteration: int = 0
    phase: str = PHASE_INITIAL
    fine_plateau_count: int = 0
    unfrozen_blocks: list = field(default_factory=list)


def init_state(model, run_cfg):
    for b in range(1, run_cfg.freeze_primary_blocks + 1):
        if f"encoder.primary.block{b}.conv1.weight" in model.params:
            model.params.set_trainable(f"encoder.primary.block{b}", False)
    velocities = {name: np.zeros_like(t.data)
                  for name, t in model.params.items() if t.requires_grad}
    return TrainState(
        model=model,
        velocities=velocities,
        lr=run_cfg.learning_rate,
        momentum=run_cfg.momentum,
        fine_tuning_momentum=run_cfg.fine_tuning_momentum,
        noiserates=run_cfg.noiserates(),
        tracker=PlateauTracker(window=run_cfg.plateau_window, threshold=run_cfg.plateau_threshold),
        noise_rng=np.random.default_rng([run_cfg.seed, 1]),
        seed=run_cfg.seed,
    )


def nesterov_step(params, state):
    """v <- mu*v - lr*g ; theta <- theta + mu*v - lr*g (practical Nesterov)."""
    mu = np.float32(state.momentum)
    lr = np.float32(state.lr)
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise OrthosegError(f"trainable parameter {name} has no gradient")
        v = state.velocities[name]
        g = t.grad.astype(t.data.dtype, copy=False)
        v_new = mu * v - lr * g
        t.data += mu * v_new - lr * g
        state.velocities[name] = v_new


def on_plateau(state):
    state.lr /= 10.0
    if state.phase == PHASE_INITIAL:
        state.phase = PHASE_FINE_TUNING
        state.momentum = state.fine_tuning_momentum
        return
    state.noiserates.decay(NOISE_DECAY_ENCODER, NOISE_DECAY_DECODER, NOISE_DECAY_SCCB)
    state.fine_plateau_count += 1
    block = {1: 2, 2: 1}.get(state.fine_plateau_count)
    if block is not None:
        prefix = f"encoder.primary.block{block}"
        if f"{prefix}.conv1.weight" in state.model.params:
            names = state.model.params.set_trainable(prefix, True)
            for n in names:
                state.velocities.setdefault(n, np.zeros_like(state.model.params[n].data))
            state.unfrozen_blocks.append(block)


# ---------------------------------------------------------------------------
# checkpoint bridging


def state_to_checkpoint(path, state, config_digest, config_text=""):
    header = {
        "config_digest": config_digest,
        "config_text": config_text,
        "digest_algorithm": "sha256",
        "iteration": state.iteration,
        "phase": state.phase,
        "lr": state.lr,
        "momentum": state.momentum,
        "fine_tuning_momentum": state.fine_tuning_momentum,
        "noiserates": state.noiserates.to_dict(),
        "frozen": state.model.params.frozen_names(),
        "fine_plateau_count": state.fine_plateau_count,
        "unfrozen_blocks": state.unfrozen_blocks,
        "tracker": state.tracker.to_dict(),
        "noise_rng_state": state.noise_rng.bit_generator.state,
        "seed": state.seed,
    }
    tensors = {}
    for name, t in state.model.params.items():
        tensors[f"param:{name}"] = t.data
    for name, v in state.velocities.items():
        tensors[f"velocity:{name}"] = v
    ckpt.save_checkpoint(path, header, tensors)


def state_from_checkpoint(path, network_config, expected_digest=None, override=False):
    header, tensors = ckpt.load_checkpoint(path)
    if expected_digest is not None:
        ckpt.check_digest(header, expected_digest, override)
    model = Model.build(network_config, seed=0)
    for name, t in model.params.items():
        key = f"param:{name}"
        if key not in tensors:
            raise OrthosegError(f"checkpoint missing parameter {name}")
        if tensors[key].shape != t.data.shape:
            raise OrthosegError(f"checkpoint shape mismatch for {name}")
        t.data = tensors[key].astype(t.data.dtype)
    frozen = set(header["frozen"])
    for name, t in model.params.items():
        t.requires_grad = name not in frozen
    velocities = {}
    for key, arr in tensors.items():
        if key.startswith("velocity:"):
            velocities[key[len("velocity:"):]] = arr.astype(np.float32)
    rng = np.random.default_rng()
    rng.bit_generator.state = header["noise_rng_state"]
    state = TrainState(
        model=model,
        velocities=velocities,
        lr=header["lr"],
        momentum=header["momentum"],
        fine_tuning_momentum=header["fine_tuning_momentum"],
        noiserates=NoiseRates.from_dict(header["noiserates"]),
        tracker=PlateauTracker.from_dict(header["tracker"]),
        noise_rng=rng,
        seed=header["seed"],
        iteration=header["iteration"],
        phase=header["phase"],
        fine_plateau_count=header["fine_plateau_count"],
        unfrozen_blocks=list(header["unfrozen_blocks"]),
    )
    return state, header


# ---------------------------------------------------------------------------
# the loop


def _epoch_index(seed, epoch, n, pos):
    order = np.random.default_rng([seed, 2, epoch]).permutation(n)
    return int(order[pos])


def validation_loss(model, val_samples, noiserates):
    total = 0.0
    for primary, auxiliary, label_half in val_samples:
        probs = model.forward(primary[None], auxiliary[None], training=False,
                              noiserates=noiserates)
        total += ad.cross_entropy_value(probs.data, label_half[None])
    return total / len(val_samples)


def pixel_accuracy(model, samples):
    correct = total = 0
    for primary, auxiliary, label_half in samples:
        probs = model.forward(primary[None], auxiliary[None], training=False)
        pred = probs.data.argmax(axis=1)[0]
        correct += int((pred == label_half).sum())
        total += label_half.size
    return correct / total


METRICS_FIELDS = ("iteration", "train_loss", "val_loss", "lr", "momentum", "phase",
                  "noiserate_encoder_top", "noiserate_decoder_top",
                  "noiserate_sccb", "noiserate_residual", "unfrozen_blocks")


def train_loop(run_cfg, model, train_samples, val_samples, out_dir,
               max_iterations=None, state=None):
    """Batch-size-1 iteration loop with plateau-driven schedule transitions.

    Returns the final TrainState.  Appends one CSV line per evaluation to
    ``out_dir/metrics.csv``; checkpoints on every new validation best and
    every ``checkpoint_interval`` iterations.
    """
    if not train_samples:
        raise OrthosegError("empty training set")
    if not val_samples:
        raise OrthosegError("validation set required for plateau scheduling")
    os.makedirs(out_dir, exist_ok=True)
    if state is None:
        state = init_state(model, run_cfg)
    digest = run_cfg.digest()
    cfg_text = run_cfg.serialize()
    limit = run_cfg.max_iterations if max_iterations is None else max_iterations
    metrics_path = os.path.join(out_dir, "metrics.csv")
    new_log = not os.path.exists(metrics_path)
    n = len(train_samples)
    best_seen = state.tracker.best_loss

    with open(metrics_path, "a", newline="") as logf:
        writer = csv.writer(logf)
        if new_log:
            writer.writerow(METRICS_FIELDS)
        while state.iteration < limit:
            idx = _epoch_index(state.seed, state.iteration // n, n, state.iteration % n)
            primary, auxiliary, label_half = train_samples[idx]
            probs = state.model.forward(primary[None], auxiliary[None], training=True,
                                        rng=state.noise_rng, noiserates=state.noiserates)
            loss = ad.cross_entropy_loss(probs, label_half[None])
            train_loss = float(loss.data)
            if not math.isfinite(train_loss):
                diag = os.path.join(out_dir, "diagnostic.ckpt")
                state_to_checkpoint(diag, state, digest, cfg_text)
                raise NumericalError(
                    f"non-finite loss at iteration {state.iteration}; diagnostic checkpoint {diag}")
            state.model.params.zero_grads()
            ad.backward(loss)
            nesterov_step(state.model.params, state)
            state.model.params.zero_grads()
            state.iteration += 1

            if state.iteration % run_cfg.eval_interval == 0 or state.iteration == limit:
                val_loss = validation_loss(state.model, val_samples, state.noiserates)
                fired = state.tracker.check(state.iteration, val_loss)
                if fired:
                    on_plateau(state)
                writer.writerow([
                    state.iteration, f"{train_loss:.6f}", f"{val_loss:.6f}",
                    state.lr, state.momentum, state.phase,
                    state.noiserates.rate("encoder", 512),
                    state.noiserates.rate("decoder", 512),
                    state.noiserates.sccb, state.noiserates.residual,
                    " ".join(str(b) for b in state.unfrozen_blocks),
                ])
                logf.flush()
                if val_loss < best_seen:
                    best_seen = val_loss
                    state_to_checkpoint(os.path.join(out_dir, "best.ckpt"), state, digest, cfg_text)
            if state.iteration % run_cfg.checkpoint_interval == 0:
                state_to_checkpoint(os.path.join(out_dir, "latest.ckpt"), state, digest, cfg_text)

    state_to_checkpoint(os.path.join(out_dir, "final.ckpt"), state, digest, cfg_text)
    return state
