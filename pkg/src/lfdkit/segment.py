"""Unsupervised trajectory segmentation via collapsed Gibbs sampling.

Every observation (one per frame) carries a subgoal-driven intention term
(softmax over optimality scores toward candidate subgoal cells) and a
feature term (conjugate Gaussian predictive).  A Chinese-restaurant prior
lets the number of skills grow with the data.  The sampler alternates
subgoal draws per (skill, demonstration) with assignment draws per
observation, scores every sweep with a joint log-probability, and reports
the best-scoring snapshot after burn-in.

Two ablations reuse the machinery: "bngmm" drops the subgoal term from the
assignment weights (pure feature clustering); "bnirl" drops the feature
term and scores the observed action with a one-step softmax over actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .config import EngineConfig
from .conjugate import (GaussianStats, NIWParams, Predictive, marginal_loglik,
                        mvt_logpdf, niw_logpdf, posterior_params,
                        subgoal_prior, weakly_informative)
from .data import ObservationSet
from .grid import (Grid, GridPath, ValueTable, one_step_loglik_matrix,
                   subgoal_loglik_matrix)
from .mixture import gaussian_logpdf
from .skills import SkillModel

MODES = ("bngirl", "bngmm", "bnirl")


@dataclass
class Problem:
    """Immutable precomputation shared by all chains."""

    oset: ObservationSet
    grid: Grid
    paths: list
    frame_ll: list          # per demo: (N_d, C_d) subgoal log-likelihood rows
    features: np.ndarray    # (N, F) pooled (normalized) features
    demo_of: np.ndarray     # (N,) demo index
    local_of: np.ndarray    # (N,) frame index within demo
    beta_c: NIWParams
    beta_g: NIWParams
    mode: str
    config: EngineConfig
    fixed_k: int | None = None   # spawn disabled: finite mixture with
                                 # symmetric Dirichlet eta/K over K clusters

    @property
    def n_obs(self) -> int:
        return len(self.features)


def build_problem(oset: ObservationSet, grid: Grid, paths: list,
                  table: ValueTable, config: EngineConfig,
                  mode: str = "bngirl", fixed_k: int | None = None) -> Problem:
    if mode not in MODES:
        raise ValueError(f"unknown segmentation mode '{mode}'")
    frame_ll = []
    for path in paths:
        if mode == "bnirl":
            step_ll = one_step_loglik_matrix(path, table, config.alpha)
        else:
            step_ll = subgoal_loglik_matrix(path, table, config.alpha)
        frame_ll.append(step_ll[path.frame_to_step])
    feats = oset.pooled_features()
    demo_of = np.concatenate([np.full(len(d), i) for i, d in enumerate(oset.demos)])
    local_of = np.concatenate([np.arange(len(d)) for d in oset.demos])
    states = np.concatenate([d.states() for d in oset.demos], axis=0)
    return Problem(oset=oset, grid=grid, paths=paths, frame_ll=frame_ll,
                   features=feats, demo_of=demo_of.astype(int),
                   local_of=local_of.astype(int),
                   beta_c=weakly_informative(feats),
                   beta_g=subgoal_prior(states, config.subgoal_prior_cells * grid.h),
                   mode=mode, config=config, fixed_k=fixed_k)


@dataclass
class Snapshot:
    iteration: int
    z: np.ndarray
    subgoals: dict          # label -> {demo -> candidate index}
    k: int
    logprob: float


class State:
    """Mutable sampler state: assignments, cluster stats, subgoals."""

    def __init__(self, problem: Problem, rng: np.random.Generator,
                 k_init: int | None = None, z0: np.ndarray | None = None):
        self.problem = problem
        p = problem
        if z0 is not None:
            self.z = np.asarray(z0, int).copy()
        else:
            k = p.fixed_k if p.fixed_k else (
                k_init if k_init is not None else p.config.k_init)
            if p.config.init == "blocks" and not p.fixed_k:
                # contiguous chunks per demonstration: respects the temporal
                # structure skills actually have and mixes far better than
                # scattering labels uniformly
                self.z = np.empty(p.n_obs, dtype=int)
                for d in range(len(p.oset.demos)):
                    mask = p.demo_of == d
                    n = int(mask.sum())
                    self.z[mask] = np.minimum((np.arange(n) * k) // n, k - 1)
            else:
                self.z = rng.integers(0, k, size=p.n_obs)
        self.clusters: dict = {}
        self.subgoals: dict = {}
        self._next = 0
        labels = (range(p.fixed_k) if p.fixed_k else
                  (int(v) for v in np.unique(self.z)))
        for lab in labels:
            pred = Predictive(p.beta_c, GaussianStats.from_data(p.features[self.z == lab]))
            self.clusters[int(lab)] = pred
            self.subgoals[int(lab)] = {}
        if not p.fixed_k:
            self._relabel()
        self._next = max(self.clusters) + 1
        for lab in sorted(self.clusters):
            for d in range(len(p.oset.demos)):
                if (self.z[p.demo_of == d] == lab).any():
                    self.subgoals[lab][d] = int(rng.integers(len(p.paths[d].candidates)))

    @property
    def k(self) -> int:
        return len(self.clusters)

    def counts(self) -> dict:
        return {lab: pred.stats.n for lab, pred in self.clusters.items()}

    def _relabel(self) -> None:
        """Compact labels to 0..K-1 (deterministic: sorted old labels)."""
        mapping = {old: new for new, old in enumerate(sorted(self.clusters))}
        if all(o == n for o, n in mapping.items()):
            return
        self.z = np.array([mapping[int(v)] for v in self.z])
        self.clusters = {mapping[o]: pred for o, pred in self.clusters.items()}
        self.subgoals = {mapping[o]: sg for o, sg in self.subgoals.items()}

    def subgoal_index(self, lab: int, demo: int, rng: np.random.Generator) -> int:
        """Candidate index of skill lab's subgoal in demo; drawn lazily if absent."""
        sg = self.subgoals[lab]
        if demo not in sg:
            sg[demo] = int(rng.integers(len(self.problem.paths[demo].candidates)))
        return sg[demo]

    def snapshot(self, iteration: int, logprob: float) -> Snapshot:
        return Snapshot(iteration=iteration, z=self.z.copy(),
                        subgoals={lab: dict(sg) for lab, sg in self.subgoals.items()},
                        k=self.k, logprob=logprob)


def _plugin_feature_logpdf(state: State, lab: int) -> tuple:
    """Posterior-mean plug-in parameters and a row evaluator for cluster lab."""
    mean, cov = state.clusters[lab].posterior_mean()
    chol = np.linalg.cholesky(cov)
    return mean, cov, chol


def sample_subgoals(state: State, rng: np.random.Generator) -> None:
    """Draw a subgoal per (skill, demonstration) from its full conditional.

    Candidate cells are the ones this skill's own frames visit in the
    demonstration (a subgoal is a state the skill reaches; on straight path
    segments every cell further ahead scores as optimal, so an open support
    lets subgoals drift outside the segment).  Each candidate is scored by
    the Student-T predictive given the other demonstrations' subgoals of
    the same skill, times the summed observation likelihood of the skill's
    frames under the plug-in constraint region.
    """
    p = state.problem
    n_demos = len(p.oset.demos)
    for d in rng.permutation(n_demos):
        d = int(d)
        path = p.paths[d]
        cand_centers = p.grid.centers(path.candidates)
        cell_to_cand = {int(c): j for j, c in enumerate(path.candidates)}
        in_demo = p.demo_of == d
        for lab in sorted(state.clusters):
            members = in_demo & (state.z == lab)
            if not members.any():
                state.subgoals[lab].pop(d, None)
                continue
            others = [p.grid.centers([p.paths[od].candidates[ci]])[0]
                      for od, ci in state.subgoals[lab].items() if od != d]
            if others:
                stats = GaussianStats.from_data(np.array(others))
                mn, kn, Sn, nun = posterior_params(stats, p.beta_g)
            else:
                mn, kn, Sn, nun = posterior_params(None, p.beta_g)
            dof = nun - p.beta_g.dim + 1
            scale = Sn * (kn + 1) / (kn * dof)
            mean_c, _, chol_c = _plugin_feature_logpdf(state, lab)
            idx = np.nonzero(members)[0]
            own_steps = np.unique(path.frame_to_step[p.local_of[idx]])
            own = np.unique([cell_to_cand[int(path.cells[st])] for st in own_steps])
            prior_ll = mvt_logpdf(cand_centers[own], mn,
                                  np.linalg.cholesky(scale), dof)
            w = gaussian_logpdf(p.features[idx], mean_c, chol_c)
            rows = p.frame_ll[d][p.local_of[idx]][:, own]
            data_ll = logsumexp(rows + w[:, None], axis=0)
            logits = prior_ll + data_ll
            probs = np.exp(logits - logsumexp(logits))
            probs = probs / probs.sum()
            choice = int(np.searchsorted(np.cumsum(probs), rng.random()))
            state.subgoals[lab][d] = int(own[min(choice, len(probs) - 1)])


def draw_from_log_weights(logw: np.ndarray, rng: np.random.Generator) -> int:
    """Sample an index proportionally to exp(logw), max-shifted."""
    probs = np.exp(logw - logw.max())
    cum = np.cumsum(probs)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1])), len(probs) - 1)


def assignment_log_weights(state: State, i: int, rng: np.random.Generator,
                           prior_pred: Predictive | None = None) -> tuple:
    """Unnormalized log weights for observation i over existing clusters plus
    a fresh one.  Assumes i's statistics are already removed from its
    cluster.  Returns (labels, logw, new_subgoal_candidate_index)."""
    p = state.problem
    eta = p.config.eta
    use_subgoal = p.mode in ("bngirl", "bnirl")
    use_features = p.mode in ("bngirl", "bngmm")
    if prior_pred is None:
        prior_pred = Predictive(p.beta_c)
    d = int(p.demo_of[i])
    row = p.frame_ll[d][p.local_of[i]]
    x = p.features[i]
    labs = sorted(state.clusters)
    if p.fixed_k:
        # finite mixture, symmetric Dirichlet eta/K: K never changes and
        # emptied clusters stay eligible through their prior mass
        alpha0 = eta / p.fixed_k
        logw = np.empty(len(labs))
        for j, lab in enumerate(labs):
            w = math.log(state.clusters[lab].stats.n + alpha0)
            if use_subgoal:
                w += row[state.subgoal_index(lab, d, rng)]
            if use_features:
                w += state.clusters[lab].logpdf_one(x)
            logw[j] = w
        return labs, logw, -1
    logw = np.empty(len(labs) + 1)
    for j, lab in enumerate(labs):
        nk = state.clusters[lab].stats.n
        if nk == 0:
            logw[j] = -np.inf
            continue
        w = math.log(nk)
        if use_subgoal:
            w += row[state.subgoal_index(lab, d, rng)]
        if use_features:
            w += state.clusters[lab].logpdf_one(x)
        logw[j] = w
    new_sg = int(rng.integers(len(p.paths[d].candidates)))
    w = np.log(eta) if eta > 0 else -np.inf
    if np.isfinite(w):
        if use_subgoal:
            w += row[new_sg]
        if use_features:
            w += prior_pred.logpdf_one(x)
    logw[-1] = w
    return labs, logw, new_sg


def sample_assignments(state: State, rng: np.random.Generator) -> None:
    """Resample every observation's skill assignment in random order.

    Weights combine the restaurant-process prior with the mode's likelihood
    terms; a fresh cluster with a randomly drawn subgoal competes alongside
    the existing ones.  Emptied clusters are removed immediately.
    """
    p = state.problem
    prior_pred = Predictive(p.beta_c)
    for i in rng.permutation(p.n_obs):
        i = int(i)
        d = int(p.demo_of[i])
        x = p.features[i]
        old = int(state.z[i])
        state.clusters[old].remove(x)
        labs, logw, new_sg = assignment_log_weights(state, i, rng, prior_pred)
        choice = draw_from_log_weights(logw, rng)
        if choice == len(labs):
            lab = state._next
            state._next += 1
            state.clusters[lab] = Predictive(p.beta_c)
            state.subgoals[lab] = {d: new_sg}
        else:
            lab = labs[choice]
        state.z[i] = lab
        state.clusters[lab].add(x)
        if not p.fixed_k and state.clusters[old].stats.n == 0:
            del state.clusters[old]
            del state.subgoals[old]
    if not p.fixed_k:
        state._relabel()
        state._next = state.k


def joint_logprob(state: State) -> float:
    """Ranking score for a snapshot: observation terms, assignment prior,
    subgoal priors, and plug-in constraint-region priors."""
    p = state.problem
    n = p.n_obs
    eta = p.config.eta
    use_subgoal = p.mode in ("bngirl", "bnirl")
    use_features = p.mode in ("bngirl", "bngmm")
    total = 0.0
    denom = np.log(n - 1 + eta)
    for lab, pred in state.clusters.items():
        members = np.nonzero(state.z == lab)[0]
        nk = len(members)
        # assignment pseudo-prior: each member sees the others
        if nk == 1:
            total += (np.log(eta) if eta > 0 else -np.inf) - denom
        else:
            total += nk * (np.log(nk - 1) - denom)
        if use_features:
            mean_c, cov_c, chol_c = _plugin_feature_logpdf(state, lab)
            total += float(gaussian_logpdf(p.features[members], mean_c, chol_c).sum())
            total += niw_logpdf(mean_c, cov_c, p.beta_c)
        if use_subgoal:
            for i in members:
                d = int(p.demo_of[i])
                sg = state.subgoals[lab].get(d)
                if sg is not None:
                    total += p.frame_ll[d][p.local_of[i], sg]
        pts = [p.grid.centers([p.paths[od].candidates[ci]])[0]
               for od, ci in state.subgoals[lab].items()]
        if pts:
            total += marginal_loglik(np.array(pts), p.beta_g)
    return float(total)


@dataclass
class ChainResult:
    snapshots: list
    logprobs: np.ndarray
    seed: int


def run_chain(problem: Problem, seed: int, iterations: int | None = None,
              progress=None) -> ChainResult:
    """One Gibbs chain: alternate subgoal and assignment sweeps."""
    cfg = problem.config
    T = cfg.iterations if iterations is None else iterations
    rng = np.random.default_rng(seed)
    state = State(problem, rng)
    snaps = [state.snapshot(0, joint_logprob(state))]
    for t in range(1, T + 1):
        sample_subgoals(state, rng)
        sample_assignments(state, rng)
        lp = joint_logprob(state)
        snaps.append(state.snapshot(t, lp))
        if progress is not None:
            progress(t, T, state.k, lp)
    return ChainResult(snapshots=snaps,
                       logprobs=np.array([s.logprob for s in snaps]), seed=seed)


def run(problem: Problem, seed: int | None = None, chains: int | None = None,
        iterations: int | None = None, progress=None) -> tuple:
    """Run one or more chains; returns (all chain results, MAP snapshot).

    The MAP snapshot maximizes the joint score over post-burn-in iterations
    across every chain.
    """
    cfg = problem.config
    seed = cfg.seed if seed is None else seed
    n_chains = cfg.chains if chains is None else chains
    seeds = [int(s.generate_state(1)[0] % (2**31)) for s in
             np.random.SeedSequence(seed).spawn(n_chains)]
    results = [run_chain(problem, s, iterations, progress) for s in seeds]
    best = None
    for res in results:
        start = min(cfg.burn_in, len(res.snapshots) - 1)
        for snap in res.snapshots[start:]:
            if best is None or snap.logprob > best.logprob:
                best = snap
    return results, best


def _median_smooth(labels: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(labels) < window:
        return labels.copy()
    half = window // 2
    padded = np.concatenate([labels[:half][::-1], labels, labels[-half:][::-1]])
    out = np.empty_like(labels)
    for i in range(len(labels)):
        out[i] = int(np.median(padded[i:i + window]))
    return out


def extract_segments(snapshot: Snapshot, problem: Problem,
                     raw_oset: ObservationSet | None = None) -> tuple:
    """Turn the MAP snapshot into ordered skills and per-frame labels.

    Labels are median-smoothed, skills are ordered by mean frame index, the
    subgoal region is fitted on the per-demo subgoal points (cell-scale
    covariance floor), and the constraint region on the assigned features.
    Observation subsets come from raw_oset when given (the unnormalized
    corpus), so runtime models see physical units.
    Returns (list of SkillModel, {demo_id: labels}).
    """
    p = problem
    cfg = p.config
    rows_src = raw_oset if raw_oset is not None else p.oset
    n_demos = len(p.oset.demos)
    smoothed = snapshot.z.copy()
    for d in range(n_demos):
        mask = p.demo_of == d
        smoothed[mask] = _median_smooth(snapshot.z[mask], cfg.smooth_window)

    present = [lab for lab in np.unique(smoothed)]
    order = sorted(present, key=lambda lab: (np.nonzero(smoothed == lab)[0].mean(), lab))
    skills = []
    id_of = {}
    h = p.grid.h
    for new_id, lab in enumerate(order, start=1):
        members = np.nonzero(smoothed == lab)[0]
        feats = p.features[members]
        mu_c = feats.mean(axis=0)
        sigma_c = np.cov(feats.T) if len(members) > 1 else np.zeros((feats.shape[1],) * 2)
        sigma_c = np.atleast_2d(sigma_c)
        floor = cfg.cov_floor * max(np.trace(sigma_c) / len(mu_c), 1.0)
        sigma_c = sigma_c + floor * np.eye(len(mu_c))

        sg_map = snapshot.subgoals.get(lab, {})
        pts = []
        for od in sorted(sg_map):
            ci = sg_map[od]
            pts.append(p.grid.centers([p.paths[od].candidates[ci]])[0])
        if not pts:
            # a label surviving only through smoothing may lack subgoals;
            # fall back to its last member state
            all_states = np.concatenate([d.states() for d in p.oset.demos], axis=0)
            pts = [all_states[members[-1]]]
        pts = np.array(pts)
        mu_g = pts.mean(axis=0)
        sigma_g = np.cov(pts.T) if len(pts) > 1 else np.zeros((2, 2))
        sigma_g = np.atleast_2d(sigma_g) + (h / 2) ** 2 * np.eye(2)

        dists = []
        for g in pts:
            dev = g - mu_g
            dists.append(np.sqrt(max(dev @ np.linalg.solve(sigma_g, dev), 0.0)))
        dmax = max(max(dists), cfg.subgoal_dmax_floor)

        raw_rows = []
        missing = []
        for d_idx, demo in enumerate(rows_src.demos):
            dm = members[p.demo_of[members] == d_idx]
            if len(dm) == 0:
                missing.append(demo.id)
                continue
            loc = p.local_of[dm]
            raw_rows.append(np.hstack([demo.states()[loc], demo.actions()[loc],
                                       demo.features()[loc]]))
        skills.append(SkillModel(
            id=new_id, mu_g=mu_g, sigma_g=sigma_g, subgoal_points=pts,
            subgoal_dmax=float(dmax), mu_c=mu_c, sigma_c=sigma_c,
            rows=np.concatenate(raw_rows, axis=0),
            missing_demos=tuple(missing),
        ))
        id_of[lab] = new_id

    relabeled = np.array([id_of[int(v)] for v in smoothed])
    per_demo = {}
    for d_idx, demo in enumerate(p.oset.demos):
        per_demo[demo.id] = relabeled[p.demo_of == d_idx]
    return skills, per_demo
