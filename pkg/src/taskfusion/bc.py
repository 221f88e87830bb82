"""Toy 2-D pushing environment plus behavior cloning on frozen features.

The environment is a unit square: a gripper moves by bounded (dx, dy)
actions and shoves a cube by rigid contact; an episode succeeds when the
cube ends within the success radius of the target. A scripted expert
walks behind the cube and pushes it along the cube-to-target line,
supplying demonstrations. The policy is a small MLP over a frozen
single-frame encoder embedding, optionally concatenated with the
gripper position, trained with mean squared action error.

Scene rendering reuses the synthetic-clip palette (the cube is drawn as
the object, the gripper as the hand) so a fine-tuned encoder sees
familiar pixels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tl
from .attention import linear
from .seeding import derive_seed, rng_for
from .synth import (BACKGROUND_LEVEL, HAND_COLOR, OBJECT_COLOR_AFTER,
                    box_to_rect, draw_rect)
from .tensor import ContractError, Tensor, backward
from .trainer import AdamState, ParamStore, adam_step

TARGET_COLOR = np.array([0.20, 0.35, 0.95])


@dataclass
class ToyEnvConfig:
    horizon: int = 50
    success_radius: float = 0.05
    max_step: float = 0.05
    contact_radius: float = 0.06
    image: int = 32
    noise: float = 0.04
    cube_size: float = 0.25
    gripper_size: float = 0.16


@dataclass
class EnvState:
    gripper: np.ndarray  # (x, y) in [0, 1]^2
    cube: np.ndarray
    target: np.ndarray


class ToyEnv:
    """Deterministic pushing dynamics; the cube moves only under contact."""

    def __init__(self, config: ToyEnvConfig | None = None):
        self.config = config or ToyEnvConfig()
        self.state: EnvState | None = None
        self._background: np.ndarray | None = None
        self.steps = 0

    def reset(self, seed: int) -> EnvState:
        cfg = self.config
        rng = np.random.Generator(np.random.PCG64(seed))
        bg = BACKGROUND_LEVEL + rng.uniform(-cfg.noise, cfg.noise,
                                            size=(cfg.image, cfg.image, 3))
        self._background = np.clip(bg, 0.0, 1.0)
        while True:
            cube = rng.uniform(0.3, 0.7, size=2)
            target = rng.uniform(0.3, 0.7, size=2)
            gripper = rng.uniform(0.1, 0.9, size=2)
            if (np.linalg.norm(cube - target) >= 0.08
                    and np.linalg.norm(gripper - cube)
                    >= cfg.contact_radius + 0.02):
                break
        self.state = EnvState(gripper=gripper, cube=cube, target=target)
        self.steps = 0
        return self.state

    def step(self, action: np.ndarray) -> EnvState:
        if self.state is None:
            raise ContractError("step before reset")
        cfg = self.config
        a = np.clip(np.asarray(action, dtype=np.float64),
                    -cfg.max_step, cfg.max_step)
        g = np.clip(self.state.gripper + a, 0.0, 1.0)
        cube = self.state.cube
        sep = cube - g
        dist = float(np.linalg.norm(sep))
        if dist < cfg.contact_radius:
            direction = sep / dist if dist > 0 else np.array([1.0, 0.0])
            cube = np.clip(g + direction * cfg.contact_radius, 0.0, 1.0)
        self.state = EnvState(gripper=g, cube=cube, target=self.state.target)
        self.steps += 1
        return self.state

    def success(self) -> bool:
        return (np.linalg.norm(self.state.cube - self.state.target)
                < self.config.success_radius)

    def render(self) -> np.ndarray:
        cfg = self.config
        img = self._background.copy()
        n = cfg.image
        tx, ty = self.state.target
        marker = box_to_rect((tx, ty, cfg.cube_size * 0.6, cfg.cube_size * 0.6),
                             n, n)
        x0, y0, w, h = marker
        img[max(y0, 0):y0 + h, max(x0, 0):x0 + w] = TARGET_COLOR
        inner = (x0 + 1, y0 + 1, max(w - 2, 0), max(h - 2, 0))
        ix, iy, iw, ih = inner
        img[max(iy, 0):iy + ih, max(ix, 0):ix + iw] = \
            self._background[max(iy, 0):iy + ih, max(ix, 0):ix + iw]
        cx, cy = self.state.cube
        draw_rect(img, box_to_rect((cx, cy, cfg.cube_size, cfg.cube_size),
                                   n, n), OBJECT_COLOR_AFTER)
        gx, gy = self.state.gripper
        draw_rect(img, box_to_rect((gx, gy, cfg.gripper_size, cfg.gripper_size),
                                   n, n), HAND_COLOR)
        return np.clip(img, 0.0, 1.0)


def expert_policy(state: EnvState, cfg: ToyEnvConfig) -> np.ndarray:
    """Scripted demonstrator: line up behind the cube, then push it along
    the cube-to-target line; steps shrink near the goal to avoid overshoot."""
    to_target = state.target - state.cube
    d = float(np.linalg.norm(to_target))
    if d <= cfg.success_radius * 0.5:
        return np.zeros(2)
    push_dir = to_target / d
    standoff = cfg.contact_radius + 0.01
    behind = state.cube - push_dir * standoff
    to_behind = behind - state.gripper
    d_behind = float(np.linalg.norm(to_behind))

    if d_behind > 0.015:
        step = to_behind / (d_behind + 1e-12) * min(cfg.max_step, d_behind)
        nxt = state.gripper + step
        # Detour instead of brushing the cube on the way around.
        if np.linalg.norm(nxt - state.cube) < cfg.contact_radius + 0.005:
            radial = state.gripper - state.cube
            radial = radial / (np.linalg.norm(radial) + 1e-12)
            tangent = np.array([-radial[1], radial[0]])
            if np.dot(tangent, to_behind) < 0:
                tangent = -tangent
            step = (tangent + radial * 0.3)
            step = step / np.linalg.norm(step) * cfg.max_step
        return np.clip(step, -cfg.max_step, cfg.max_step)
    push = push_dir * min(cfg.max_step, d)
    return np.clip(push, -cfg.max_step, cfg.max_step)


@dataclass
class Transition:
    obs: np.ndarray      # [image, image, 3]
    proprio: np.ndarray  # gripper (x, y)
    action: np.ndarray   # expert (dx, dy)


@dataclass
class Demo:
    seed: int
    transitions: list[Transition]
    success: bool


def run_episode(env: ToyEnv, actor, seed: int,
                record: bool = False) -> tuple[bool, list[Transition]]:
    """Roll one seeded episode; ``actor(state, obs) -> action``."""
    state = env.reset(seed)
    transitions: list[Transition] = []
    for _ in range(env.config.horizon):
        obs = env.render()
        action = np.asarray(actor(state, obs), dtype=np.float64)
        if record:
            transitions.append(Transition(obs=obs,
                                          proprio=state.gripper.copy(),
                                          action=action.copy()))
        state = env.step(action)
        if env.success():
            break
    return env.success(), transitions


def collect_demos(count: int, seed: int,
                  env_cfg: ToyEnvConfig | None = None) -> list[Demo]:
    """Seeded expert rollouts; the (unexpected) failures are dropped."""
    if count < 1:
        raise ContractError("need at least one demonstration")
    cfg = env_cfg or ToyEnvConfig()
    env = ToyEnv(cfg)
    demos: list[Demo] = []
    i = 0
    while len(demos) < count:
        ep_seed = derive_seed(seed, "demo", i)
        i += 1
        ok, transitions = run_episode(
            env, lambda s, o: expert_policy(s, cfg), ep_seed, record=True)
        if not ok:
            warnings.warn(f"expert failed on demo seed {ep_seed}; discarded")
            continue
        demos.append(Demo(seed=ep_seed, transitions=transitions, success=ok))
    return demos


@dataclass
class Policy:
    """Two-layer MLP from [embedding (+ proprio)] to a (dx, dy) action."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    use_proprio: bool
    max_step: float

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int, hidden: int = 64,
             use_proprio: bool = True, max_step: float = 0.05) -> "Policy":
        d_in = embed_dim + (2 if use_proprio else 0)
        return cls(
            w1=tl.randn(rng, (d_in, hidden), std=1.0 / np.sqrt(d_in),
                        requires_grad=True),
            b1=tl.zeros(hidden, requires_grad=True),
            w2=tl.randn(rng, (hidden, 2), std=0.01, requires_grad=True),
            b2=tl.zeros(2, requires_grad=True),
            use_proprio=use_proprio,
            max_step=max_step,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def store(self) -> ParamStore:
        s = ParamStore()
        s.add_module("policy", self.parameters())
        return s

    def forward(self, x: Tensor) -> Tensor:
        h = tl.gelu(linear(x, self.w1, self.b1))
        return linear(h, self.w2, self.b2)

    def act(self, embedding: np.ndarray, proprio: np.ndarray) -> np.ndarray:
        parts = [embedding] + ([proprio] if self.use_proprio else [])
        x = tl.constant(np.concatenate(parts)[None, :])
        raw = self.forward(x).data[0]
        return np.clip(raw, -self.max_step, self.max_step)

    def as_actor(self, embed_fn):
        def actor(state: EnvState, obs: np.ndarray) -> np.ndarray:
            return self.act(embed_fn(obs), state.gripper)
        return actor


def _demo_features(demos: list[Demo], embed_fn,
                   use_proprio: bool) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for demo in demos:
        for tr in demo.transitions:
            e = embed_fn(tr.obs)
            xs.append(np.concatenate([e, tr.proprio]) if use_proprio else e)
            ys.append(tr.action)
    return np.stack(xs), np.stack(ys)


def bc_train(demos: list[Demo], embed_fn, steps: int, seed: int,
             lr: float = 1e-3, batch_size: int = 64,
             use_proprio: bool = True,
             max_step: float = 0.05) -> tuple[Policy, list[float]]:
    """Regress expert actions from frozen embeddings (+ proprio).

    Observations are embedded once up front; gradients never reach the
    encoder. Returns the trained policy and the per-step loss log.
    """
    if not demos:
        raise ContractError("no demonstrations")
    x_all, y_all = _demo_features(demos, embed_fn, use_proprio)
    n = x_all.shape[0]
    rng = rng_for(seed, "bc")
    policy = Policy.init(rng, embed_dim=x_all.shape[1] - (2 if use_proprio else 0),
                         use_proprio=use_proprio, max_step=max_step)
    store = policy.store()
    adam = AdamState(lr=lr)
    log: list[float] = []
    size = min(batch_size, n)
    for _ in range(steps):
        idx = rng.choice(n, size=size, replace=False)
        xb = tl.constant(x_all[idx])
        yb = tl.constant(y_all[idx])
        diff = tl.sub(policy.forward(xb), yb)
        loss = tl.mean_all(tl.mul(diff, diff))
        backward(loss)
        adam_step(store, adam)
        log.append(loss.item())
    return policy, log


def bc_eval(actor, episodes: int, seed: int,
            env_cfg: ToyEnvConfig | None = None) -> float:
    """Fraction of seeded episodes the actor solves within the horizon."""
    if episodes < 1:
        raise ContractError("need at least one episode")
    cfg = env_cfg or ToyEnvConfig()
    env = ToyEnv(cfg)
    wins = 0
    for i in range(episodes):
        ok, _ = run_episode(env, actor, derive_seed(seed, "eval", i))
        wins += int(ok)
    return wins / episodes


@dataclass
class CompareReport:
    tuned_rate: float
    random_rate: float
    tuned_per_seed: list[float] = field(default_factory=list)
    random_per_seed: list[float] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.tuned_rate - self.random_rate


def compare_representations(tuned_embed, random_embed, demos: list[Demo],
                            bc_steps: int, seeds: list[int], episodes: int,
                            env_cfg: ToyEnvConfig | None = None,
                            use_proprio: bool = True) -> CompareReport:
    """A/B the two frozen embeddings under the identical BC protocol:
    same demos, per-seed policy training, paired evaluation episodes."""
    cfg = env_cfg or ToyEnvConfig()
    results: dict[str, list[float]] = {"tuned": [], "random": []}
    for name, embed in (("tuned", tuned_embed), ("random", random_embed)):
        for s in seeds:
            policy, _ = bc_train(demos, embed, steps=bc_steps, seed=s,
                                 use_proprio=use_proprio,
                                 max_step=cfg.max_step)
            rate = bc_eval(policy.as_actor(embed), episodes,
                           derive_seed(s, "bc-eval"), cfg)
            results[name].append(rate)
    return CompareReport(
        tuned_rate=float(np.mean(results["tuned"])),
        random_rate=float(np.mean(results["random"])),
        tuned_per_seed=results["tuned"],
        random_per_seed=results["random"],
    )
