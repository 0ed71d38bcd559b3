"""Desk-scale synthetic simulator wiring cost -> transport -> gated attention
across an annealed multi-step schedule, plus the seeded generators behind
every statistical test in the suite.

Scenes are guillotine partitions of a patch grid into rectangular objects
with distinct prototype features and an exact boundary edge map; the loop
replaces a real denoiser with a fixed mix-in token update so plan
progression (flips, cross-boundary mass, coverage) is observable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .attention import (
    GateConfig,
    PartTokenSet,
    ProjectionSet,
    add_part_identity,
    ot_gated_cross_attention,
    standard_cross_attention,
)
from .cost import CostParams, EdgeMap, PatchGrid, build_cost, downsample_edge_map, sobel_edge_map
from .errors import ConfigError, DimensionError, ValidationError
from .numerics import Rng
from .ot import TransportProblem, hard_plan, plan_to_gate_weights, solve_entropic_ot, uniform_marginals


@dataclass
class SceneConfig:
    grid_height: int = 14
    grid_width: int = 14
    num_objects: int = 2
    feature_dim: int = 32
    noise_sigma: float = 0.35
    prototype_similarity: float = 0.3
    boundary_blend: float = 0.0
    boundary_noise: float = 0.0
    boundary_band: int = 2
    pixels_per_patch: int = 4
    seed: int = 0


CONTACT_ZONE_WIDTH = 2


def contact_boundary_config(seed: int) -> SceneConfig:
    """Scene preset with ambiguous contact zones: patches within the contact
    band lean toward the neighboring object's prototype and carry extra
    noise (strongest at the wall, decaying outward), the failure mode the
    edge regularizer exists to fix."""
    return SceneConfig(
        seed=seed,
        noise_sigma=0.5,
        prototype_similarity=0.5,
        boundary_blend=0.45,
        boundary_noise=0.8,
        boundary_band=CONTACT_ZONE_WIDTH,
    )


@dataclass
class SyntheticScene:
    grid: PatchGrid
    patch_features: np.ndarray
    labels: np.ndarray
    edge_map: EdgeMap
    num_objects: int
    seed: int


def _guillotine_rectangles(rng: Rng, height: int, width: int, count: int):
    """Split the grid into ``count`` rectangles by repeated axis cuts."""
    rects = [(0, height, 0, width)]  # (r0, r1, c0, c1), half-open
    while len(rects) < count:
        areas = [(r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in rects]
        order = np.argsort(areas)[::-1]
        idx = next((i for i in order if areas[i] >= 2), None)
        if idx is None:
            raise ConfigError(f"cannot pack {count} objects into {height}x{width}")
        r0, r1, c0, c1 = rects.pop(int(idx))
        h, w = r1 - r0, c1 - c0
        if h >= w and h >= 2:
            cut = r0 + 1 + rng.integer(h - 1)
            rects.extend([(r0, cut, c0, c1), (cut, r1, c0, c1)])
        else:
            cut = c0 + 1 + rng.integer(w - 1)
            rects.extend([(r0, r1, c0, cut), (r0, r1, cut, c1)])
    return rects


def contact_zone(labels2d: np.ndarray, band: int) -> tuple[np.ndarray, np.ndarray]:
    """Distance (in 4-neighbor hops, capped at band+1) from each patch to the
    nearest differently labeled patch, plus that patch's label.

    Distance 0 marks patches directly adjacent to another object.
    """
    h, w = labels2d.shape
    dist = np.full((h, w), band + 1, dtype=int)
    other = labels2d.copy()
    for r in range(h):
        for c in range(w):
            own = labels2d[r, c]
            for rr, cc in ((r, c + 1), (r, c - 1), (r + 1, c), (r - 1, c)):
                if 0 <= rr < h and 0 <= cc < w and labels2d[rr, cc] != own:
                    dist[r, c] = 0
                    other[r, c] = labels2d[rr, cc]
                    break
    for d in range(1, band + 1):
        for r in range(h):
            for c in range(w):
                if dist[r, c] <= band:
                    continue
                for rr, cc in ((r, c + 1), (r, c - 1), (r + 1, c), (r - 1, c)):
                    if (
                        0 <= rr < h
                        and 0 <= cc < w
                        and dist[rr, cc] == d - 1
                        and labels2d[rr, cc] == labels2d[r, c]
                    ):
                        dist[r, c] = d
                        other[r, c] = other[rr, cc]
                        break
    return dist, other


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Deterministic synthetic scene: rectangular objects with distinct
    feature prototypes, per-patch noise, and an exact boundary edge map
    built from Sobel responses of per-object masks."""
    h, w = config.grid_height, config.grid_width
    if h < 4 or w < 4:
        raise ConfigError(f"grid must be at least 4x4, got {h}x{w}")
    if config.num_objects < 1 or config.num_objects > h * w:
        raise ConfigError(f"cannot place {config.num_objects} objects on {h}x{w}")
    rng = Rng(config.seed)
    rects = _guillotine_rectangles(rng.spawn(1), h, w, config.num_objects)
    labels2d = np.zeros((h, w), dtype=int)
    for o, (r0, r1, c0, c1) in enumerate(rects):
        labels2d[r0:r1, c0:c1] = o

    feat_rng = rng.spawn(2)
    shared = feat_rng.normals(config.feature_dim)
    shared /= np.linalg.norm(shared)
    prototypes = np.empty((config.num_objects, config.feature_dim))
    for o in range(config.num_objects):
        v = feat_rng.normals(config.feature_dim)
        v /= np.linalg.norm(v)
        p = (1.0 - config.prototype_similarity) * v + config.prototype_similarity * shared
        prototypes[o] = p / np.linalg.norm(p)
    labels = labels2d.reshape(-1)
    features = prototypes[labels].copy()

    if config.num_objects > 1 and (config.boundary_blend > 0 or config.boundary_noise > 0):
        dist2d, other2d = contact_zone(labels2d, config.boundary_band)
        dist = dist2d.reshape(-1)
        neighbor = other2d.reshape(-1)
        decay = 0.5 ** np.clip(dist, 0, config.boundary_band)
        in_band = dist <= config.boundary_band
        extra = feat_rng.normals(h * w, config.feature_dim) * (
            config.boundary_noise / np.sqrt(config.feature_dim)
        )
        for j in np.flatnonzero(in_band):
            blend = config.boundary_blend * decay[j]
            features[j] = (1.0 - blend) * features[j] + blend * prototypes[neighbor[j]]
            features[j] += decay[j] * extra[j]

    features += feat_rng.normals(h * w, config.feature_dim) * (
        config.noise_sigma / np.sqrt(config.feature_dim)
    )

    pp = config.pixels_per_patch
    labels_img = np.repeat(np.repeat(labels2d, pp, axis=0), pp, axis=1)
    edge = np.zeros_like(labels_img, dtype=float)
    for o in range(config.num_objects):
        mask = (labels_img == o).astype(float)
        edge = np.maximum(edge, sobel_edge_map(mask, normalize="step").values)
    edge_map = EdgeMap(edge)
    grid = downsample_edge_map(edge_map, h, w)
    return SyntheticScene(grid, features, labels, edge_map, config.num_objects, config.seed)


@dataclass
class PlantedVolumes:
    """Paired latent volumes with a strong shared mode and planted object labels."""

    tokens_a: np.ndarray
    tokens_b: np.ndarray
    labels: np.ndarray  # stacked: volume A rows then volume B rows


def generate_planted_volumes(
    tokens_per_volume: int = 128,
    width: int = 16,
    seed: int = 0,
    shared_energy_ratio: float = 4.0,
    object_separation: float = 2.0,
    noise_sigma: float = 0.25,
    shared_jitter: float = 0.1,
) -> PlantedVolumes:
    """Two token sets sharing a bimodal nuisance mode of energy
    ``shared_energy_ratio`` times the object-mean energy.

    Row i of both volumes sees the same nuisance coefficient, making it the
    cross-volume-correlated direction CCA should find; object labels are
    independent per volume, so the object axis carries no cross correlation.
    """
    rng = Rng(seed)
    e_obj = rng.normals(width)
    e_obj /= np.linalg.norm(e_obj)
    g = rng.normals(width)
    g -= (g @ e_obj) * e_obj
    g /= np.linalg.norm(g)
    sigma_g = np.sqrt(shared_energy_ratio) * (object_separation / 2.0)

    k = tokens_per_volume
    labels_a = np.array([rng.integer(2) for _ in range(k)])
    labels_b = np.array([rng.integer(2) for _ in range(k)])
    modes = np.array([2.0 * rng.integer(2) - 1.0 for _ in range(k)]) * sigma_g
    half = object_separation / 2.0

    def volume(labels):
        signs = 2.0 * labels - 1.0
        c = modes + shared_jitter * sigma_g * rng.normals(k)
        return (
            signs[:, None] * half * e_obj[None, :]
            + c[:, None] * g[None, :]
            + noise_sigma * rng.normals(k, width)
        )

    tokens_a = volume(labels_a)
    tokens_b = volume(labels_b)
    return PlantedVolumes(tokens_a, tokens_b, np.concatenate([labels_a, labels_b]))


@dataclass
class Schedule:
    """Per-step hyperparameter values for the simulated denoising loop."""

    lambda_t: np.ndarray
    lambda_edge: np.ndarray
    gamma_edge: np.ndarray
    epsilon_t: np.ndarray
    k_ot: int = 40
    gated_block_fraction: float = 0.5
    blocks_per_step: int = 6
    residual_branch: bool = False
    residual_weight: float = 0.2
    update_step: float = 0.1

    def __post_init__(self):
        arrays = [self.lambda_t, self.lambda_edge, self.gamma_edge, self.epsilon_t]
        lengths = {len(a) for a in arrays}
        if len(lengths) != 1:
            raise ValidationError("schedule arrays must share one length")
        if np.any(np.diff(self.lambda_edge) > 1e-12) or np.any(np.diff(self.gamma_edge) > 1e-12):
            raise ValidationError("lambda_edge and gamma_edge must be non-increasing over steps")
        if not (0 < self.gated_block_fraction <= 1):
            raise ValidationError("gated_block_fraction must be in (0, 1]")

    @property
    def total_steps(self) -> int:
        return len(self.lambda_t)

    @classmethod
    def default(
        cls,
        total_steps: int = 24,
        lambda_t: float = 2.5,
        lambda_edge: float = 0.8,
        gamma_edge: float = 8.0,
        epsilon_t: float = 0.10,
        **kwargs,
    ) -> "Schedule":
        """Linear anneal of the edge terms from 1.5x down to 0.5x of their
        base values (base values hold at the midpoint); guidance strength
        and entropic weight stay constant."""
        if total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if total_steps == 1:
            factor = np.ones(1)
        else:
            factor = 1.5 - np.arange(total_steps) / (total_steps - 1)
        return cls(
            lambda_t=np.full(total_steps, lambda_t),
            lambda_edge=lambda_edge * factor,
            gamma_edge=gamma_edge * factor,
            epsilon_t=np.full(total_steps, epsilon_t),
            **kwargs,
        )


@dataclass
class ProgressionLog:
    hard_plans: np.ndarray  # (T, L) part indices
    flip_fraction: np.ndarray
    cross_edge_mass: np.ndarray
    coverage: np.ndarray  # (T, N) patch counts
    boundary_agreement: np.ndarray
    plans: list = field(default_factory=list)

    def write_csv(self, fh) -> None:
        n = self.coverage.shape[1]
        header = "step,flip_fraction,cross_edge_mass," + ",".join(
            f"coverage_part{i}" for i in range(n)
        )
        fh.write(header + "\n")
        for t in range(self.hard_plans.shape[0]):
            cells = [
                str(t),
                format(self.flip_fraction[t], ".17g"),
                format(self.cross_edge_mass[t], ".17g"),
            ] + [str(int(c)) for c in self.coverage[t]]
            fh.write(",".join(cells) + "\n")


def match_parts_to_objects(mass_by_object: np.ndarray) -> tuple[int, ...]:
    """Injective part -> object matching maximizing matched mass.

    mass_by_object[i, o] is the mass part i receives from object o's patches.
    Exhaustive over the smaller side (fine for the <= 8 parts used here).
    """
    n, o = mass_by_object.shape
    if min(n, o) > 8:
        raise DimensionError("matching supports at most 8 parts/objects")
    best, best_map = -1.0, None
    if n <= o:
        for perm in permutations(range(o), n):
            total = sum(mass_by_object[i, perm[i]] for i in range(n))
            if total > best:
                best, best_map = total, perm
        return best_map
    best_map_parts = None
    for perm in permutations(range(n), o):
        total = sum(mass_by_object[perm[j], j] for j in range(o))
        if total > best:
            best, best_map_parts = total, perm
    assign = [-1] * n
    for j, i in enumerate(best_map_parts):
        assign[i] = j
    return tuple(assign)


def plan_object_mass(plan: np.ndarray, labels: np.ndarray, num_objects: int) -> np.ndarray:
    mass = np.zeros((plan.shape[0], num_objects))
    for o in range(num_objects):
        mass[:, o] = plan[:, labels == o].sum(axis=1)
    return mass


def cross_edge_mass(plan: np.ndarray, labels: np.ndarray, num_objects: int) -> float:
    """Transported mass that crosses the ground-truth object partition,
    after the best part <-> object matching."""
    mass = plan_object_mass(plan, labels, num_objects)
    assign = match_parts_to_objects(mass)
    matched = sum(mass[i, assign[i]] for i in range(plan.shape[0]) if assign[i] >= 0)
    return float(plan.sum() - matched)


def boundary_patches(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    lab = labels.reshape(height, width)
    boundary = np.zeros((height, width), dtype=bool)
    boundary[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    boundary[:, 1:] |= lab[:, :-1] != lab[:, 1:]
    boundary[:-1, :] |= lab[:-1, :] != lab[1:, :]
    boundary[1:, :] |= lab[:-1, :] != lab[1:, :]
    return boundary.reshape(-1)


def boundary_agreement(
    plan: np.ndarray, hard: np.ndarray, scene: SyntheticScene, band: int = CONTACT_ZONE_WIDTH
) -> float:
    """Fraction of contact-zone patches (within ``band`` hops of another
    object) whose hard assignment matches the ground-truth object under the
    plan's part <-> object matching."""
    mass = plan_object_mass(plan, scene.labels, scene.num_objects)
    assign = match_parts_to_objects(mass)
    mapped = np.array([assign[i] for i in hard])
    labels2d = scene.labels.reshape(scene.grid.height, scene.grid.width)
    dist, _ = contact_zone(labels2d, band)
    zone = (dist <= band).reshape(-1)
    if not np.any(zone):
        return 1.0
    return float(np.mean(mapped[zone] == scene.labels[zone]))


@dataclass
class LoopSetup:
    """Scene plus the token/projection state the loop evolves."""

    scene: SyntheticScene
    tokens: PartTokenSet
    proj: ProjectionSet


def default_loop_setup(
    seed: int,
    scene_config: SceneConfig | None = None,
    num_parts: int = 2,
    tokens_per_part: int = 8,
    token_width: int = 32,
    model_dim: int = 32,
    heads: int = 4,
) -> LoopSetup:
    cfg = scene_config if scene_config is not None else SceneConfig(seed=seed)
    scene = generate_scene(cfg)
    rng = Rng(seed).spawn(1000)
    tokens = PartTokenSet.seeded(rng, num_parts, tokens_per_part, token_width)
    proj = ProjectionSet.seeded(rng, token_width, scene.patch_features.shape[1], model_dim, heads)
    return LoopSetup(scene, tokens, proj)


def default_problem(seed: int) -> TransportProblem:
    """The suite's reference transport problem: cost built from a default
    2-object 14x14 scene at the nominal edge settings, epsilon 0.10."""
    setup = default_loop_setup(seed)
    cost, _ = build_cost(setup.tokens, setup.scene.patch_features, setup.proj, setup.scene.grid, CostParams())
    return TransportProblem.with_uniform_marginals(cost, 0.10)


def run_denoising_loop(
    scene: SyntheticScene,
    tokens: PartTokenSet,
    proj: ProjectionSet,
    schedule: Schedule,
    rng: Rng | None = None,
    epsilon_g: float = 0.02,
    baseline: bool = False,
    collect_plans: bool = False,
) -> ProgressionLog:
    """Iterate cost -> transport -> gated attention for the whole schedule.

    Each step solves one transport problem from the current tokens, gates
    the first ceil(fraction * B) of B attention applications with it, and
    mixes every application's output into the tokens with the fixed update
    step. ``baseline`` forces all applications onto the standard path
    (the loop the revert guarantee is measured against). ``rng`` is accepted
    for interface stability; the default update rule draws nothing from it.
    """
    del rng  # the fixed mix-in update is deterministic
    t_steps = schedule.total_steps
    l = scene.grid.num_patches
    if scene.patch_features.shape[0] != l:
        raise DimensionError("scene features inconsistent with its grid")
    n = tokens.num_parts
    blocks = [b.copy() for b in tokens.blocks]
    current = PartTokenSet(blocks, tokens.identities.copy())
    n_gated = int(np.ceil(schedule.gated_block_fraction * schedule.blocks_per_step))

    hard_plans = np.zeros((t_steps, l), dtype=int)
    flips = np.zeros(t_steps)
    cross = np.zeros(t_steps)
    coverage = np.zeros((t_steps, n), dtype=int)
    agreement = np.zeros(t_steps)
    plans = []

    prev_hard = None
    for t in range(t_steps):
        params = CostParams(
            lambda_edge=float(schedule.lambda_edge[t]),
            gamma_edge=float(schedule.gamma_edge[t]),
        )
        cost, _ = build_cost(current, scene.patch_features, proj, scene.grid, params)
        problem = TransportProblem(
            cost, uniform_marginals(n), uniform_marginals(l), float(schedule.epsilon_t[t])
        )
        result = solve_entropic_ot(problem, schedule.k_ot)
        gates = plan_to_gate_weights(result.plan)
        hard = hard_plan(result.plan)

        hard_plans[t] = hard
        flips[t] = 0.0 if prev_hard is None else float(np.mean(hard != prev_hard))
        cross[t] = cross_edge_mass(result.plan, scene.labels, scene.num_objects)
        coverage[t] = np.bincount(hard, minlength=n)
        agreement[t] = boundary_agreement(result.plan, hard, scene)
        if collect_plans:
            plans.append(result.plan)
        prev_hard = hard

        cfg = GateConfig(lambda_t=float(schedule.lambda_t[t]), epsilon_g=epsilon_g)
        for b in range(schedule.blocks_per_step):
            flat = np.vstack(current.blocks)
            if not baseline and b < n_gated:
                out = ot_gated_cross_attention(current, scene.patch_features, proj, gates, cfg)
                if schedule.residual_branch:
                    z = add_part_identity(current)
                    out = out + schedule.residual_weight * standard_cross_attention(
                        z, scene.patch_features, proj
                    )
            else:
                z = add_part_identity(current)
                out = standard_cross_attention(z, scene.patch_features, proj)
            flat = flat + schedule.update_step * (out - flat)
            current = PartTokenSet.from_flat(flat, n, current.identities)

    return ProgressionLog(hard_plans, flips, cross, coverage, agreement, plans)


DEFAULT_SWEEP_KEYS = ("epsilon_t", "gamma_edge", "lambda_edge", "gated_block_fraction")

TABLE_DEFAULTS = {
    "epsilon_t": 0.10,
    "lambda_edge": 0.8,
    "gamma_edge": 8.0,
    "lambda_t": 2.5,
    "epsilon_g": 0.02,
    "k_ot": 40,
    "gated_block_fraction": 0.5,
}


@dataclass
class SweepRow:
    params: dict
    seed: str
    final_flip: float
    max_flip_last_quarter: float
    final_cross_edge: float
    boundary_agreement: float
    min_coverage: int
    is_default: bool


def _summarize(log: ProgressionLog) -> tuple[float, float, float, float, int]:
    t = log.flip_fraction.shape[0]
    last_quarter = log.flip_fraction[max(t - t // 4, 1) :] if t > 1 else log.flip_fraction
    return (
        float(log.flip_fraction[-1]),
        float(last_quarter.max()) if last_quarter.size else 0.0,
        float(log.cross_edge_mass[-1]),
        float(log.boundary_agreement[-1]),
        int(log.coverage[-1].min()),
    )


def sweep(
    grid: dict[str, list],
    seeds: list[int],
    scene_config: SceneConfig | None = None,
    total_steps: int = 24,
) -> list[SweepRow]:
    """Run the loop over the cartesian product of the grid values.

    Emits one row per (config, seed) plus a mean row per config; rows whose
    parameters coincide with the nominal defaults are flagged.
    """
    for key in grid:
        if key not in DEFAULT_SWEEP_KEYS:
            raise ConfigError(f"unsupported sweep key {key!r}; choose from {DEFAULT_SWEEP_KEYS}")
    keys = [k for k in DEFAULT_SWEEP_KEYS if k in grid]
    combos: list[dict] = [{}]
    for key in keys:
        combos = [dict(c, **{key: v}) for c in combos for v in grid[key]]

    rows: list[SweepRow] = []
    for combo in combos:
        params = dict(TABLE_DEFAULTS)
        params.update(combo)
        is_default = all(
            abs(params[k] - TABLE_DEFAULTS[k]) < 1e-12 for k in DEFAULT_SWEEP_KEYS
        )
        per_seed = []
        for seed in seeds:
            cfg = scene_config if scene_config is not None else SceneConfig(seed=seed)
            cfg.seed = seed
            setup = default_loop_setup(seed, cfg)
            schedule = Schedule.default(
                total_steps=total_steps,
                lambda_t=params["lambda_t"],
                lambda_edge=params["lambda_edge"],
                gamma_edge=params["gamma_edge"],
                epsilon_t=params["epsilon_t"],
                k_ot=int(params["k_ot"]),
                gated_block_fraction=params["gated_block_fraction"],
            )
            log = run_denoising_loop(
                setup.scene, setup.tokens, setup.proj, schedule, epsilon_g=params["epsilon_g"]
            )
            summary = _summarize(log)
            per_seed.append(summary)
            rows.append(SweepRow(dict(combo), str(seed), *summary, is_default))
        means = tuple(float(np.mean([s[i] for s in per_seed])) for i in range(4))
        min_cov = int(min(s[4] for s in per_seed))
        rows.append(SweepRow(dict(combo), "mean", *means, min_cov, is_default))
    return rows


def write_sweep_csv(rows: list[SweepRow], fh) -> None:
    keys = sorted({k for row in rows for k in row.params})
    header = keys + [
        "seed",
        "final_flip",
        "max_flip_last_quarter",
        "final_cross_edge",
        "boundary_agreement",
        "min_coverage",
        "is_default",
    ]
    fh.write(",".join(header) + "\n")
    for row in rows:
        cells = [format(row.params.get(k, TABLE_DEFAULTS.get(k)), ".17g") for k in keys]
        cells += [
            row.seed,
            format(row.final_flip, ".17g"),
            format(row.max_flip_last_quarter, ".17g"),
            format(row.final_cross_edge, ".17g"),
            format(row.boundary_agreement, ".17g"),
            str(row.min_coverage),
            "1" if row.is_default else "0",
        ]
        fh.write(",".join(cells) + "\n")
