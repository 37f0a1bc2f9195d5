"""Episode loop, training schedule, evaluation and checkpoints for all four variants."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path
from typing import Callable
import zlib

import numpy as np

from . import coordinator as coord
from . import dqn_agent as dqn
from . import iese
from . import nn_core as nn
from .config import RunConfig, to_ini
from .coordinator import CoordinatorSpec, GlobalExperience, GlobalMemory, QMatrix
from .dqn_agent import AgentParams, DqnSpec, Experience, ReplayBuffer
from .errors import ContractError, NumericError
from .rewards import global_reward, individual_reward
from .road_network import RoadNetwork, Turn, build_grid
from .state_codec import encode_agent_state, encode_env_info
from .traffic_sim import EpisodeState, capture_distances, decision_mask, decision_point, reset, step

log = logging.getLogger(__name__)

Policy = Callable[[EpisodeState], list[int]]


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


def episode_seed(seed: int, name: str, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(name.encode()), k])


# -------------------------------------------------------------------- model


@dataclass
class PursuitModel:
    variant: str
    dqn_spec: DqnSpec
    agents: list[AgentParams]
    coord_spec: CoordinatorSpec | None = None
    coordinator: nn.ParamStore | None = None

    @classmethod
    def create(cls, config: RunConfig, rng: np.random.Generator | None = None) -> "PursuitModel":
        rng = rng or stream(config.train.seed, "init")
        sim = config.sim
        spec = DqnSpec(config.encoder_spec(), config.uses_iese, config.model.head_hidden, config.train.target_sync)
        scale = (1.0, float(max(sim.M - 1, 1)), float(max(sim.N, 1)))
        agents = [AgentParams.create(spec, scale, rng) for _ in range(sim.M)]
        cspec = store = None
        if config.uses_coordinator:
            cspec = coordinator_spec(config)
            store = coord.init_store(cspec, sim.N, sim.B, rng, qm_divisor=config.reward.c2)
        return cls(config.variant, spec, agents, cspec, store)

    def q_matrix(self, states: np.ndarray) -> np.ndarray:
        return np.stack([dqn.q_values_batch(s[None], a.primary, self.dqn_spec).data[0] for s, a in zip(states, self.agents)]).astype(np.float64)

    def greedy_actions(self, episode: EpisodeState) -> np.ndarray:
        """Actions the trained system would issue (no exploration)."""
        grid = episode.grid
        states = np.stack([encode_agent_state(episode, grid, m).stacked() for m in range(len(self.agents))])
        masks = np.stack([decision_mask(episode, m) for m in range(len(self.agents))])
        with nn.no_grad():
            qm = QMatrix(self.q_matrix(states), masks)
            if self.coordinator is not None:
                return coord.optimize_joint(encode_env_info(episode, grid), qm, self.coordinator, self.coord_spec).actions
        return coord.actions_from(qm)


def coordinator_spec(config: RunConfig) -> CoordinatorSpec:
    return CoordinatorSpec(2 * config.grid.W, config.grid.K, 2 * config.grid.n_roads, config.sim.M,
                           config.model.coord_hidden)


# ------------------------------------------------------------------ learner


@dataclass
class Learner:
    """Replay memories plus the running loss record for one training run."""

    buffers: list[ReplayBuffer]
    memory: GlobalMemory | None
    agent_losses: list[list[float]] = field(default_factory=list)
    coord_losses: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, config: RunConfig, model: PursuitModel) -> "Learner":
        shape = (3, 2 * config.grid.W, config.grid.K)
        t = config.train
        buffers = [ReplayBuffer(t.replay_capacity, shape) for _ in model.agents]
        memory = GlobalMemory(t.memory_capacity, model.coord_spec.input_size) if model.coordinator is not None else None
        return cls(buffers, memory, [[] for _ in model.agents])

    def reset_losses(self) -> None:
        self.agent_losses = [[] for _ in self.buffers]
        self.coord_losses = []


@dataclass
class EpisodeMetrics:
    total_timestep: int
    total_reward: float
    average_reward: float
    captures: list[dict]
    agent_rewards: list[float]
    agent_loss: list[float | None] = field(default_factory=list)
    coord_loss: float | None = None
    seed: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def epsilon_for(config: RunConfig, episode: int) -> float:
    t = config.train
    if not t.eps_decay:
        return t.epsilon
    horizon = max(1, int(round(t.eps_decay_frac * t.episodes)))
    frac = min(1.0, episode / horizon)
    return t.eps_start + frac * (t.epsilon - t.eps_start)


def _swap_to(row: np.ndarray, mask: np.ndarray, a: int) -> np.ndarray:
    legal = np.flatnonzero(mask)
    cur = int(legal[np.argmax(row[legal])])
    row = row.copy()
    row[a], row[cur] = row[cur], row[a]
    return row


def run_episode(
    config: RunConfig,
    model: PursuitModel | None,
    mode: str = "eval",
    seed=0,
    *,
    learner: Learner | None = None,
    epsilon: float | None = None,
    explore_rng: np.random.Generator | None = None,
    replay_rng: np.random.Generator | None = None,
    policy: Policy | None = None,
    initial_state: EpisodeState | None = None,
    grid: RoadNetwork | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> EpisodeMetrics:
    """Play one episode. In train mode, store experiences and learn every timestep."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if model is None and policy is None:
        raise ContractError("run_episode needs a model or a scripted policy")
    train = mode == "train"
    if train and (learner is None or model is None or policy is not None):
        raise ContractError("train mode needs a model and a learner, and no scripted policy")
    t = config.train
    grid = grid or (initial_state.grid if initial_state is not None else build_grid(config.grid))
    state = initial_state if initial_state is not None else reset(config.sim, grid, seed)
    M = len(state.pursuers)
    eps = (epsilon if epsilon is not None else t.epsilon) if train else 0.0
    explore_rng = explore_rng or np.random.default_rng(0)
    replay_rng = replay_rng or np.random.default_rng(0)
    use_coord = model is not None and model.coordinator is not None

    total = 0.0
    agent_totals = [0.0] * M
    if learner is not None:
        learner.reset_losses()

    states = np.stack([encode_agent_state(state, grid, m).stacked() for m in range(M)])
    masks = np.stack([decision_mask(state, m) for m in range(M)])
    while not state.done:
        info: dict = {}
        x = encode_env_info(state, grid) if use_coord or on_step is not None else None
        if policy is not None:
            actions = np.asarray(policy(state), dtype=np.int64)
            qm_exec = None
        else:
            with nn.no_grad():
                try:
                    qm = QMatrix(model.q_matrix(states), masks)
                    if use_coord:
                        res = coord.optimize_joint(x, qm, model.coordinator, model.coord_spec)
                        qm_exec, actions = res.qm, res.actions.copy()
                        info.update(q_tot_initial=res.initial_score, q_tot=res.score, improvements=res.improvements)
                    else:
                        qm_exec, actions = qm, coord.actions_from(qm)
                except NumericError as exc:
                    raise NumericError(f"action selection, step {state.clock}: {exc}") from exc
            if train and eps > 0:
                values = qm_exec.values.copy()
                for m in range(M):
                    if explore_rng.random() < eps:
                        legal = np.flatnonzero(masks[m])
                        actions[m] = legal[explore_rng.integers(len(legal))]
                        values[m] = _swap_to(values[m], masks[m], int(actions[m]))
                qm_exec = QMatrix(values, masks)
        if on_step is not None:
            info["attention"] = _attention_dump(model, states) if model is not None and model.dqn_spec.use_iese else None

        state, events = step(state, [int(a) for a in actions])
        parts = [individual_reward(m, events, config.reward) for m in range(M)]
        rewards = [p.total for p in parts]
        R = global_reward(rewards)
        total += R
        for m in range(M):
            agent_totals[m] += rewards[m]

        next_states = np.stack([encode_agent_state(state, grid, m).stacked() for m in range(M)])
        next_masks = np.stack([decision_mask(state, m) for m in range(M)])
        if train:
            terminal = not state.alive_evaders
            for m in range(M):
                learner.buffers[m].store(Experience(states[m], int(actions[m]), rewards[m], next_states[m], terminal, next_masks[m]))
            if learner.memory is not None:
                learner.memory.store(GlobalExperience(x, qm_exec, R), model.coordinator)
            for m, agent in enumerate(model.agents):
                batch = learner.buffers[m].sample(t.batch_size, replay_rng)
                if batch is not None:
                    try:
                        learner.agent_losses[m].append(dqn.learn_step(agent, batch, t.gamma, t.lr, t.grad_clip or None))
                    except NumericError as exc:
                        raise NumericError(f"agent {m}, step {state.clock}: {exc}") from exc
            if learner.memory is not None:
                sample = learner.memory.sample(t.coord_batch_size, replay_rng)
                if sample is not None:
                    try:
                        learner.coord_losses.append(coord.learn_step(
                            model.coordinator, model.coord_spec, *sample, t.lr, t.grad_clip or None))
                    except NumericError as exc:
                        raise NumericError(f"coordinator, step {state.clock}: {exc}") from exc
        if on_step is not None:
            rec = state.record(events)
            rec.update(actions=[int(a) for a in actions], rewards=[asdict(p) | {"total": p.total} for p in parts],
                       global_reward=R, **info)
            on_step(rec)
        states, masks = next_states, next_masks

    steps = state.clock
    captures = [{"evader": c.evader, "clock": c.clock, "pursuers": list(c.pursuers)} for c in state.capture_log]
    metrics = EpisodeMetrics(steps, total, total / steps, captures, agent_totals, seed=str(seed))
    if learner is not None:
        metrics.agent_loss = [float(np.mean(ls)) if ls else None for ls in learner.agent_losses]
        metrics.coord_loss = float(np.mean(learner.coord_losses)) if learner.coord_losses else None
    return metrics


def _attention_dump(model: PursuitModel, states: np.ndarray) -> list[list[float]]:
    out = []
    with nn.no_grad():
        for s, agent in zip(states, model.agents):
            _, w, flag = iese.encode_batch(s[None], agent.primary, model.dqn_spec.encoder)
            out.append([round(float(v), 6) for v in w[0]] if flag[0] else [])
    return out


# ----------------------------------------------------------- scripted play


def random_policy(rng: np.random.Generator) -> Policy:
    def act(state: EpisodeState) -> list[int]:
        out = []
        for m in range(len(state.pursuers)):
            legal = np.flatnonzero(decision_mask(state, m))
            out.append(int(legal[rng.integers(len(legal))]))
        return out

    return act


def chaser_policy(state: EpisodeState) -> list[int]:
    """Turn toward the nearest live evader: pick the exit whose far end is closest to it."""
    grid = state.grid
    out = []
    for m in range(len(state.pursuers)):
        node, heading = decision_point(state, m)
        mask = decision_mask(state, m)
        dists = capture_distances(state, m)
        if not dists:
            out.append(int(np.flatnonzero(mask)[0]))
            continue
        ex, ey = state.xy(min(dists, key=dists.get))
        best, best_d = None, np.inf
        for a in np.flatnonzero(mask):
            lane = grid.out_lane(node, heading.turned(Turn(int(a))))
            nx, ny = grid.nodes[lane.dst]
            d = np.hypot(nx - ex, ny - ey)
            if d < best_d:
                best, best_d = int(a), d
        out.append(best)
    return out


# -------------------------------------------------------------- evaluation


def aggregate(episodes: list[EpisodeMetrics]) -> dict:
    out = {"episodes": len(episodes)}
    for key in ("total_timestep", "total_reward", "average_reward"):
        vals = np.array([getattr(e, key) for e in episodes], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max())}
    return out


def evaluate(
    config: RunConfig,
    model: PursuitModel | None,
    n_episodes: int | None = None,
    seed: int | None = None,
    policy_factory: Callable[[int], Policy] | None = None,
) -> tuple[dict, list[EpisodeMetrics]]:
    """Greedy evaluation on seeds derived from ``seed``; returns (aggregate, per-episode metrics)."""
    n = config.train.eval_episodes if n_episodes is None else n_episodes
    seed = config.train.eval_seed if seed is None else seed
    grid = build_grid(config.grid)

    def one(i: int) -> EpisodeMetrics:
        policy = policy_factory(i) if policy_factory is not None else None
        return run_episode(config, model, "eval", episode_seed(seed, "eval", i), policy=policy, grid=grid)

    workers = config.train.eval_workers
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as pool:
            episodes = list(pool.map(one, range(n)))
    else:
        episodes = [one(i) for i in range(n)]
    return aggregate(episodes), episodes


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: PursuitModel
    history: list[EpisodeMetrics]
    learner: Learner


def train(
    config: RunConfig,
    out_dir=None,
    resume_from=None,
    step_log: bool = False,
    progress: Callable[[int, EpisodeMetrics], None] | None = None,
) -> TrainResult:
    """Run ``config.train.episodes`` training episodes (continuing from a checkpoint if given)."""
    t = config.train
    grid = build_grid(config.grid)
    if resume_from is not None:
        model, learner, start = load_checkpoint(resume_from, config)
    else:
        model = PursuitModel.create(config)
        learner = Learner.create(config, model)
        start = 0
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = steps_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(to_ini(config))
        metrics_file = (out / "metrics.jsonl").open("a" if resume_from is not None else "w")
        if step_log:
            steps_file = (out / "steps.jsonl").open("a" if resume_from is not None else "w")
    history = []
    try:
        for k in range(start, t.episodes):
            on_step = None
            if steps_file is not None:
                on_step = lambda rec, k=k: steps_file.write(json.dumps({"episode": k} | rec) + "\n")
            try:
                metrics = run_episode(
                    config, model, "train", episode_seed(t.seed, "sim", k), learner=learner,
                    epsilon=epsilon_for(config, k),
                    explore_rng=stream(t.seed, "explore", k), replay_rng=stream(t.seed, "replay", k),
                    grid=grid, on_step=on_step,
                )
            except NumericError as exc:
                raise NumericError(f"training episode {k}: {exc}") from exc
            history.append(metrics)
            if metrics_file is not None:
                metrics_file.write(json.dumps({"episode": k, "epsilon": epsilon_for(config, k)} | metrics.to_json()) + "\n")
                metrics_file.flush()
            if progress is not None:
                progress(k, metrics)
            log.info("episode %d: %d steps, reward %.3f", k, metrics.total_timestep, metrics.total_reward)
            if out is not None and t.checkpoint_every and (k + 1) % t.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{k + 1:05d}", model, learner, k + 1)
    finally:
        if metrics_file is not None:
            metrics_file.close()
        if steps_file is not None:
            steps_file.close()
    if out is not None:
        save_checkpoint(out / "final", model, learner, max(start, t.episodes))
    return TrainResult(model, history, learner)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: PursuitModel, learner: Learner | None = None, episode: int = 0) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for m, agent in enumerate(model.agents):
        nn.save_params(agent.primary, path / f"agent{m}.primary.params")
        nn.save_params(agent.target, path / f"agent{m}.target.params")
    if model.coordinator is not None:
        nn.save_params(model.coordinator, path / "coordinator.params")
    state = {
        "variant": model.variant,
        "episode": episode,
        "n_agents": len(model.agents),
        "learn_counts": [a.learn_count for a in model.agents],
    }
    (path / "state.json").write_text(json.dumps(state, indent=2))
    if learner is not None:
        arrays = {}
        for m, buf in enumerate(learner.buffers):
            arrays.update({f"agent{m}.{k}": v for k, v in buf.state_dict().items()})
        if learner.memory is not None:
            arrays.update({f"memory.{k}": v for k, v in learner.memory.state_dict().items()})
        np.savez(path / "replay.npz", **arrays)


def load_model(path, config: RunConfig) -> PursuitModel:
    path = Path(path)
    state = json.loads((path / "state.json").read_text())
    if state["variant"] != config.variant:
        raise ContractError(f"checkpoint {path} holds variant {state['variant']!r}, config asks for {config.variant!r}")
    model = PursuitModel.create(config, np.random.default_rng(0))
    for m, agent in enumerate(model.agents):
        for which in ("primary", "target"):
            loaded = nn.load_params(path / f"agent{m}.{which}.params")
            _check_same_layout(getattr(agent, which), loaded, path)
            setattr(agent, which, loaded)
        agent.learn_count = state["learn_counts"][m]
    if model.coordinator is not None:
        loaded = nn.load_params(path / "coordinator.params")
        _check_same_layout(model.coordinator, loaded, path)
        model.coordinator = loaded
    return model


def _check_same_layout(expected: nn.ParamStore, loaded: nn.ParamStore, path) -> None:
    for name, p in expected.params.items():
        if name not in loaded.params or loaded.params[name].shape != p.shape:
            raise ContractError(f"checkpoint {path}: parameter {name!r} missing or mis-shaped for this config")


def load_checkpoint(path, config: RunConfig) -> tuple[PursuitModel, Learner, int]:
    path = Path(path)
    model = load_model(path, config)
    learner = Learner.create(config, model)
    episode = json.loads((path / "state.json").read_text())["episode"]
    replay = path / "replay.npz"
    if replay.exists():
        with np.load(replay) as data:
            for m, buf in enumerate(learner.buffers):
                buf.load_state_dict({k.split(".", 1)[1]: data[k] for k in data.files if k.startswith(f"agent{m}.")})
            if learner.memory is not None:
                learner.memory.load_state_dict({k.split(".", 1)[1]: data[k] for k in data.files if k.startswith("memory.")})
    return model, learner, episode
