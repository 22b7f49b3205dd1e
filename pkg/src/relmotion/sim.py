"""Deterministic 2D chaser/evader simulator with ground-truth rendering.

Two agents interact in a rectangular arena: a rigid chaser accelerates
toward the evader, the softer evader accelerates away.  Collisions are
elastic (momentum and kinetic energy conserving), trigger a brief frozen
state with no steering, and start a squash-and-stretch deformation of the
evader that preserves area exactly in parameter space.

Everything is a pure function of the config and seed.  Rendering produces
float frames in [0, 1] plus exact binary ground-truth masks per agent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

CHASER, EVADER = "chaser", "evader"


@dataclass
class EpisodeConfig:
    arena_w: float = 64.0
    arena_h: float = 64.0
    canvas_w: int = 64
    canvas_h: int = 64
    frame_count: int = 200
    chaser_radius: float = 6.0
    evader_radius: float = 6.0
    chaser_mass: float = 1.0
    evader_mass: float = 1.0
    chaser_accel: float = 0.5
    chaser_speed: float = 3.0
    evader_accel: float = 0.35
    evader_speed: float = 2.0
    restitution: float = 1.0
    freeze_frames: int = 10
    squash_amp: float = 0.3
    squash_tau: float = 5.0
    seed: int = 0
    eyes: bool = True
    antialias: bool = True
    spawn_sides: str = "uniform"  # "uniform" or "chaser_left"

    def __post_init__(self):
        positives = [
            self.arena_w, self.arena_h, self.canvas_w, self.canvas_h,
            self.frame_count, self.chaser_radius, self.evader_radius,
            self.chaser_mass, self.evader_mass, self.chaser_accel,
            self.chaser_speed, self.evader_accel, self.evader_speed,
            self.squash_tau,
        ]
        if any(v <= 0 for v in positives):
            raise ValueError("all physical config values must be positive")
        if self.chaser_speed <= self.evader_speed:
            raise ValueError("chaser max speed must exceed evader max speed")
        if self.freeze_frames < 0 or self.squash_amp < 0:
            raise ValueError("freeze_frames and squash_amp must be non-negative")
        if self.spawn_sides not in ("uniform", "chaser_left"):
            raise ValueError(f"unknown spawn_sides {self.spawn_sides!r}")
        if self.arena_w > self.canvas_w or self.arena_h > self.canvas_h:
            raise ValueError("arena must fit inside the render canvas")

    def max_accel(self, kind: str) -> float:
        return self.chaser_accel if kind == CHASER else self.evader_accel

    def max_speed(self, kind: str) -> float:
        return self.chaser_speed if kind == CHASER else self.evader_speed


@dataclass
class AgentState:
    kind: str
    pos: np.ndarray
    vel: np.ndarray
    radius: float
    mass: float
    deform: tuple = (1.0, 1.0)
    frozen_remaining: int = 0
    frames_since_collision: int | None = None

    def copy(self) -> "AgentState":
        return AgentState(self.kind, self.pos.copy(), self.vel.copy(), self.radius,
                          self.mass, self.deform, self.frozen_remaining,
                          self.frames_since_collision)


@dataclass
class CollisionEvent:
    frame: int
    normal: np.ndarray          # unit vector from first agent to second
    momentum_pre: np.ndarray    # (2, 2): per-agent momentum before
    momentum_post: np.ndarray   # (2, 2): per-agent momentum after


@dataclass
class Episode:
    frames: np.ndarray      # (T, 3, H, W) float32 in [0, 1]
    pos: np.ndarray         # (T, 2, 2) float64, agent order [chaser, evader]
    vel: np.ndarray         # (T, 2, 2) float64
    deform: np.ndarray      # (T, 2, 2) float64 (sx, sy)
    frozen: np.ndarray      # (T, 2) int64
    since_collision: np.ndarray  # (T, 2) int64, -1 means never collided
    radius: np.ndarray      # (2,) float64
    mass: np.ndarray        # (2,) float64
    gt_masks: np.ndarray    # (T, 2, H, W) bool
    events: list[CollisionEvent]
    config: EpisodeConfig

    def __len__(self) -> int:
        return self.frames.shape[0]

    def state_at(self, t: int, agent: int) -> AgentState:
        fsc = int(self.since_collision[t, agent])
        return AgentState(
            kind=CHASER if agent == 0 else EVADER,
            pos=self.pos[t, agent].copy(),
            vel=self.vel[t, agent].copy(),
            radius=float(self.radius[agent]),
            mass=float(self.mass[agent]),
            deform=tuple(self.deform[t, agent]),
            frozen_remaining=int(self.frozen[t, agent]),
            frames_since_collision=None if fsc < 0 else fsc,
        )


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return np.array([1.0, 0.0])  # deterministic tie-break
    return v / n


def policy_accel(agent: AgentState, other: AgentState, cfg: EpisodeConfig) -> np.ndarray:
    """Steering acceleration: chaser runs at the other agent, evader away.

    Frozen agents get zero acceleration.
    """
    if agent.frozen_remaining > 0:
        return np.zeros(2)
    if agent.kind == CHASER:
        direction = _unit(other.pos - agent.pos)
    else:
        direction = _unit(agent.pos - other.pos)
    return cfg.max_accel(agent.kind) * direction


def integrate(state: AgentState, accel: np.ndarray, cfg: EpisodeConfig) -> AgentState:
    """Semi-implicit Euler step with dt = 1 frame and elastic wall reflection."""
    if not np.all(np.isfinite(accel)):
        raise ValueError("acceleration must be finite")
    out = state.copy()
    vel = state.vel + accel
    speed = float(np.linalg.norm(vel))
    vmax = cfg.max_speed(state.kind)
    if speed > vmax:
        vel = vel * (vmax / speed)
    pos = state.pos + vel
    for axis, extent in ((0, cfg.arena_w), (1, cfg.arena_h)):
        lo, hi = state.radius, extent - state.radius
        if pos[axis] < lo:
            pos[axis] = lo
            vel[axis] = abs(vel[axis])
        elif pos[axis] > hi:
            pos[axis] = hi
            vel[axis] = -abs(vel[axis])
    out.pos = pos
    out.vel = vel
    out.frozen_remaining = max(0, state.frozen_remaining - 1)
    if state.frames_since_collision is not None:
        out.frames_since_collision = state.frames_since_collision + 1
    return out


def detect_resolve_collision(a: AgentState, b: AgentState, cfg: EpisodeConfig):
    """Resolve overlap with a 1D elastic collision along the center line.

    Tangential velocity components are untouched; both agents enter the
    frozen state and the evader's squash clock restarts.  Returns the two
    new states and a CollisionEvent, or the inputs unchanged and None.
    """
    delta = b.pos - a.pos
    dist = float(np.linalg.norm(delta))
    rsum = a.radius + b.radius
    if dist >= rsum:
        return a, b, None
    n = _unit(delta)
    va_n = float(a.vel @ n)
    vb_n = float(b.vel @ n)
    ma, mb = a.mass, b.mass
    e = cfg.restitution
    p_total = ma * va_n + mb * vb_n
    va_n2 = (p_total - mb * e * (va_n - vb_n)) / (ma + mb)
    vb_n2 = (p_total + ma * e * (va_n - vb_n)) / (ma + mb)
    pre = np.stack([ma * a.vel, mb * b.vel])
    a2, b2 = a.copy(), b.copy()
    a2.vel = a.vel + (va_n2 - va_n) * n
    b2.vel = b.vel + (vb_n2 - vb_n) * n
    half = (rsum - dist) / 2.0
    a2.pos = a.pos - half * n
    b2.pos = b.pos + half * n
    for s in (a2, b2):  # keep bodies inside the arena even when separated at a wall
        s.pos[0] = np.clip(s.pos[0], s.radius, cfg.arena_w - s.radius)
        s.pos[1] = np.clip(s.pos[1], s.radius, cfg.arena_h - s.radius)
    a2.frozen_remaining = cfg.freeze_frames
    b2.frozen_remaining = cfg.freeze_frames
    for s in (a2, b2):
        if s.kind == EVADER:
            s.frames_since_collision = 0
    event = CollisionEvent(
        frame=-1,
        normal=n,
        momentum_pre=pre,
        momentum_post=np.stack([ma * a2.vel, mb * b2.vel]),
    )
    return a2, b2, event


def deform_at(frames_since_collision: int | None, cfg: EpisodeConfig) -> tuple:
    """Squash-and-stretch scale factors t frames after a collision.

    Stretch along x decays exponentially toward 1; sy = 1/sx keeps the
    area factor exactly 1.
    """
    if frames_since_collision is None:
        return (1.0, 1.0)
    if frames_since_collision < 0:
        raise ValueError("frames_since_collision must be >= 0")
    sx = 1.0 + cfg.squash_amp * float(np.exp(-frames_since_collision / cfg.squash_tau))
    return (sx, 1.0 / sx)


def _ellipse_fields(cx, cy, rx, ry, xs, ys):
    ex = (xs - cx) / rx
    ey = (ys - cy) / ry
    return ex * ex + ey * ey


AGENT_COLORS = {CHASER: (0.90, 0.18, 0.15), EVADER: (0.20, 0.85, 0.30)}
EYE_COLOR = (1.0, 1.0, 1.0)
BACKGROUND = (0.0, 0.0, 0.0)


def render(states, cfg: EpisodeConfig):
    """Draw agents as solid ellipses with velocity-oriented eyes.

    Returns (frame, masks): frame is (3, H, W) float32 in [0, 1]; masks is
    (len(states), H, W) bool from the exact ellipse membership test.  The
    arena is centered on the canvas when smaller than it.
    """
    h, w = cfg.canvas_h, cfg.canvas_w
    frame = np.empty((3, h, w), dtype=np.float32)
    for c in range(3):
        frame[c] = BACKGROUND[c]
    masks = np.zeros((len(states), h, w), dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    off_x = (cfg.canvas_w - cfg.arena_w) / 2.0
    off_y = (cfg.canvas_h - cfg.arena_h) / 2.0

    def paint(alpha, color):
        a = alpha.astype(np.float32)
        for c in range(3):
            frame[c] = frame[c] * (1.0 - a) + color[c] * a

    for i, s in enumerate(states):
        sx, sy = s.deform
        rx, ry = s.radius * sx, s.radius * sy
        cx, cy = s.pos[0] + off_x, s.pos[1] + off_y
        e = _ellipse_fields(cx, cy, rx, ry, xs, ys)
        masks[i] = e <= 1.0
        if cfg.antialias:
            r_eff = float(np.sqrt(rx * ry))
            alpha = np.clip(0.5 - (np.sqrt(e) - 1.0) * r_eff, 0.0, 1.0)
        else:
            alpha = masks[i].astype(np.float64)
        paint(alpha, AGENT_COLORS[s.kind])
        if cfg.eyes:
            heading = np.arctan2(*_unit(s.vel)[::-1])
            for da in (-np.pi / 6, np.pi / 6):
                ex = cx + 0.45 * s.radius * np.cos(heading + da) * sx
                ey = cy + 0.45 * s.radius * np.sin(heading + da) * sy
                er = 0.16 * s.radius
                d = np.sqrt((xs - ex) ** 2 + (ys - ey) ** 2)
                ea = np.clip(0.5 - (d - er), 0.0, 1.0) if cfg.antialias else (d <= er).astype(np.float64)
                paint(ea, EYE_COLOR)
    return np.clip(frame, 0.0, 1.0), masks


def _spawn(cfg: EpisodeConfig, rng: np.random.Generator):
    rc, re = cfg.chaser_radius, cfg.evader_radius
    if 2 * rc > min(cfg.arena_w, cfg.arena_h) or 2 * re > min(cfg.arena_w, cfg.arena_h):
        raise ValueError("agents cannot fit in the arena")
    gap = rc + re + 2.0

    def box(kind):
        r = rc if kind == CHASER else re
        lo_x, hi_x = r, cfg.arena_w - r
        if cfg.spawn_sides == "chaser_left":
            mid = cfg.arena_w / 2.0
            if kind == CHASER:
                hi_x = mid - r - 1.0
            else:
                lo_x = mid + r + 1.0
        if hi_x < lo_x:
            raise ValueError("agents cannot fit in the arena")
        return lo_x, hi_x, r, cfg.arena_h - r

    for _ in range(1000):
        pts = []
        for kind in (CHASER, EVADER):
            lo_x, hi_x, lo_y, hi_y = box(kind)
            pts.append(np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)]))
        if np.linalg.norm(pts[0] - pts[1]) >= gap:
            return pts
    raise ValueError("agents cannot fit in the arena")


def generate_episode(cfg: EpisodeConfig) -> Episode:
    """Simulate and render one episode; a pure function of (cfg, cfg.seed)."""
    rng = np.random.default_rng(cfg.seed)
    pos_c, pos_e = _spawn(cfg, rng)

    def init_vel(kind):
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0, cfg.max_speed(kind) / 2.0)
        return speed * np.array([np.cos(angle), np.sin(angle)])

    agents = [
        AgentState(CHASER, pos_c, init_vel(CHASER), cfg.chaser_radius, cfg.chaser_mass),
        AgentState(EVADER, pos_e, init_vel(EVADER), cfg.evader_radius, cfg.evader_mass),
    ]

    t_total = cfg.frame_count
    h, w = cfg.canvas_h, cfg.canvas_w
    frames = np.zeros((t_total, 3, h, w), dtype=np.float32)
    gt_masks = np.zeros((t_total, 2, h, w), dtype=bool)
    pos = np.zeros((t_total, 2, 2))
    vel = np.zeros((t_total, 2, 2))
    deform = np.ones((t_total, 2, 2))
    frozen = np.zeros((t_total, 2), dtype=np.int64)
    since = np.full((t_total, 2), -1, dtype=np.int64)
    events: list[CollisionEvent] = []

    def snapshot(t):
        for i, s in enumerate(agents):
            pos[t, i] = s.pos
            vel[t, i] = s.vel
            deform[t, i] = s.deform
            frozen[t, i] = s.frozen_remaining
            since[t, i] = -1 if s.frames_since_collision is None else s.frames_since_collision
        frames[t], gt_masks[t] = render(agents, cfg)

    snapshot(0)
    for t in range(1, t_total):
        acc = [policy_accel(agents[0], agents[1], cfg), policy_accel(agents[1], agents[0], cfg)]
        agents = [integrate(agents[i], acc[i], cfg) for i in range(2)]
        a2, b2, event = detect_resolve_collision(agents[0], agents[1], cfg)
        agents = [a2, b2]
        if event is not None:
            event.frame = t
            events.append(event)
        for s in agents:
            if s.kind == EVADER:
                s.deform = deform_at(s.frames_since_collision, cfg)
        snapshot(t)

    return Episode(frames, pos, vel, deform, frozen, since,
                   np.array([cfg.chaser_radius, cfg.evader_radius]),
                   np.array([cfg.chaser_mass, cfg.evader_mass]),
                   gt_masks, events, cfg)


def episode_config_to_json(cfg: EpisodeConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def episode_config_from_json(payload: str) -> EpisodeConfig:
    return EpisodeConfig(**json.loads(payload))
