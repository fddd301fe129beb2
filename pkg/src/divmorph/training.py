"""PPO-lite teacher training, knowledge-diversion distillation, adaptation.

All three entry points are deterministic given their seeds: rollouts are
collected serially in fixed slot order, minibatch shuffles come from the
run's own Generator, and gradient application is single-writer.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import envs
from .controller import (
    Controller,
    compute_sigmas,
    compute_sigmas_t,
    forward_np,
    forward_t,
    gaussian_entropy_t,
    gaussian_kl_t,
    gaussian_logp_t,
    init_controller,
    make_config,
    materialize_weights,
    materialize_weights_t,
)
from .errors import ContractViolationError, NumericalFailureError

ORTHO_DRIFT_LIMIT = 1e-4


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    rollout: int = 8192
    n_envs: int = 16
    max_grad_norm: float = 0.5
    # Early-stop threshold on the approximate KL between the rollout policy
    # and the updated policy.  Without it a single update cycle (epochs x
    # minibatches over the same batch) can push action means far past the
    # torque clip, where sampling can no longer recover.
    target_kl: float = 0.015


@dataclass
class DistillConfig:
    beta: float = 0.5            # student-rollout share after warmup
    warmup_frac: float = 0.2
    lr: float = 3e-4
    batch: int = 16
    budget: int = 50_000         # gradient steps
    max_grad_norm: float = 0.5
    buffer_uses: int = 32        # grad steps served per collected episode


@dataclass
class AdaptConfig:
    learngene_lr_scale: float = 0.1
    ppo: PPOConfig = field(default_factory=PPOConfig)


def n_workers():
    """Optional DIVMORPH_WORKERS override: parallelizes independent episode
    rollouts only; merge order is fixed, so results never change."""
    try:
        return max(1, int(os.environ.get("DIVMORPH_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# optimizer and gradient utilities
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lr_masks=None):
        """In-place update; lr_masks maps key -> per-element lr multiplier."""
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g**2
            step = self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            if lr_masks is not None and lr_masks.get(k) is not None:
                step = step * lr_masks[k]
            params[k] -= step


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def gradients(loss_fn, params):
    """Analytic gradients of a scalar loss over a flat parameter dict.

    loss_fn receives {name: Tensor} leaves and must return a scalar Tensor.
    Missing gradients (parameters the loss does not touch) come back as
    zeros.
    """
    t = {k: ad.Tensor(v) for k, v in params.items()}
    loss = loss_fn(t)
    loss.backward()
    return {k: (tk.grad if tk.grad is not None else np.zeros_like(tk.data))
            for k, tk in t.items()}, float(loss.data)


# ---------------------------------------------------------------------------
# rollouts and evaluation
# ---------------------------------------------------------------------------

class _WeightCache:
    """Dense materialized weights per (morph, task), valid until params change."""

    def __init__(self, ctl, task):
        self.ctl = ctl
        self.task = task
        self._cache = {}

    def sigmas(self, morph):
        key = morph.id
        if key not in self._cache:
            s = compute_sigmas(self.ctl, morph, self.task) if self.ctl.factorized else None
            self._cache[key] = (s, materialize_weights(self.ctl, s))
        return self._cache[key][0]

    def weights(self, morph):
        self.sigmas(morph)
        return self._cache[morph.id][1]


def _batched_dists(ctl, cache, groups):
    """Forward a list of (morph, [slot indices], obs list, gobs list) groups.

    Returns per-slot (mean, std, value) aligned with the original indices.
    """
    out = {}
    with ad.no_grad():
        t = ctl.tensors()
        for morph, idxs, obs_list, gobs_list in groups:
            n = morph.n_limbs
            obs = np.stack(obs_list)
            gobs = np.stack(gobs_list)
            w = {k: ad.as_tensor(v) for k, v in cache.weights(morph).items()}
            mean, ls, val = forward_t(ctl, t, w, obs, gobs, np.ones((len(idxs), n)))
            std = np.exp(ls.data)
            for row, slot in enumerate(idxs):
                out[slot] = (mean.data[row], std, val.data[row])
    return out


def _group_slots(slots):
    groups = {}
    for i, s in enumerate(slots):
        groups.setdefault(s["morph"].id, (s["morph"], [], [], []))
        g = groups[s["morph"].id]
        g[1].append(i)
        g[2].append(s["obs"])
        g[3].append(s["gobs"])
    return list(groups.values())


def collect_rollout(ctl, task, morphs, cfg, rng, episode_returns):
    """Synchronous serial rollout over cfg.n_envs slots, cfg.rollout steps total."""
    cache = _WeightCache(ctl, task)
    E = cfg.n_envs
    T = cfg.rollout // E
    slots = []
    for _ in range(E):
        morph = morphs[rng.integers(len(morphs))]
        state, obs, gobs = envs.reset(morph, task, int(rng.integers(2**63)))
        slots.append({"morph": morph, "state": state, "obs": obs, "gobs": gobs, "ret": 0.0})
    traj = [
        {"obs": [], "gobs": [], "raw": [], "logp": [], "rew": [], "val": [], "done": [],
         "morph_ids": []}
        for _ in range(E)
    ]
    for _ in range(T):
        dists = _batched_dists(ctl, cache, _group_slots(slots))
        for i, s in enumerate(slots):
            mean, std, val = dists[i]
            raw = mean + std * rng.standard_normal(mean.shape)
            act = np.clip(raw, -1.0, 1.0)
            z = (raw - mean) / std
            logp = float(np.sum(-0.5 * z**2 - np.log(std) - 0.5 * np.log(2 * np.pi)))
            tr = traj[i]
            tr["obs"].append(s["obs"])
            tr["gobs"].append(s["gobs"])
            tr["raw"].append(raw)
            tr["logp"].append(logp)
            tr["val"].append(val)
            tr["morph_ids"].append(s["morph"].id)
            state, obs, gobs, r, done = envs.step(s["state"], s["morph"], task, act)
            tr["rew"].append(r)
            tr["done"].append(done)
            s["ret"] += r
            if done:
                episode_returns.append(s["ret"])
                s["ret"] = 0.0
                s["morph"] = morphs[rng.integers(len(morphs))]
                state, obs, gobs = envs.reset(s["morph"], task, int(rng.integers(2**63)))
            s["state"], s["obs"], s["gobs"] = state, obs, gobs
    # bootstrap values for unfinished episodes
    dists = _batched_dists(ctl, cache, _group_slots(slots))
    for i in range(E):
        traj[i]["boot"] = dists[i][2]
    return traj


def gae(traj, gamma, lam):
    """Per-slot generalized advantage estimation with terminal bootstrap."""
    items = []
    for tr in traj:
        T = len(tr["rew"])
        adv = np.zeros(T)
        last = 0.0
        for t in reversed(range(T)):
            nonterm = 0.0 if tr["done"][t] else 1.0
            v_next = tr["boot"] if t == T - 1 else tr["val"][t + 1]
            delta = tr["rew"][t] + gamma * v_next * nonterm - tr["val"][t]
            last = delta + gamma * lam * nonterm * last
            adv[t] = last
        for t in range(T):
            items.append({
                "morph_id": tr["morph_ids"][t], "obs": tr["obs"][t], "gobs": tr["gobs"][t],
                "raw": tr["raw"][t], "logp": tr["logp"][t],
                "adv": adv[t], "ret": adv[t] + tr["val"][t],
            })
    advs = np.array([it["adv"] for it in items])
    mu, sd = advs.mean(), advs.std()
    for it in items:
        it["adv"] = (it["adv"] - mu) / (sd + 1e-8)
    return items


def ppo_update(ctl, task, morphs_by_id, items, cfg, opt, rng,
               trainable=None, lr_masks=None):
    """One PPO pass (cfg.epochs) over collected items; mutates ctl.params."""
    sigmas_by_morph = {}
    if ctl.factorized:
        # gates are not updated by PPO, so sigma is constant per morph
        for mid, m in morphs_by_id.items():
            sigmas_by_morph[mid] = compute_sigmas(ctl, m, task)
    losses = []
    stop = False
    for _ in range(cfg.epochs):
        if stop:
            break
        order = rng.permutation(len(items))
        for lo in range(0, len(items), cfg.minibatch):
            batch = [items[j] for j in order[lo:lo + cfg.minibatch]]
            t = ctl.tensors()
            w = None if ctl.factorized else materialize_weights_t(ctl, t)
            groups = {}
            for it in batch:
                groups.setdefault(it["morph_id"], []).append(it)
            total = None
            kl_terms = []
            for mid, its in groups.items():
                morph = morphs_by_id[mid]
                n = morph.n_limbs
                obs = np.stack([it["obs"] for it in its])
                gobs = np.stack([it["gobs"] for it in its])
                raw = np.stack([it["raw"] for it in its])
                adv = np.array([it["adv"] for it in its])
                ret = np.array([it["ret"] for it in its])
                logp_old = np.array([it["logp"] for it in its])
                mask = np.ones((len(its), n))
                if ctl.factorized:
                    sig_t = {k: ad.constant(v) for k, v in sigmas_by_morph[mid].items()}
                    w_m = materialize_weights_t(ctl, t, sig_t)
                else:
                    w_m = w
                mean, ls, val = forward_t(ctl, t, w_m, obs, gobs, mask)
                logp = gaussian_logp_t(mean, ls, raw, mask)
                kl_terms.append(logp_old - logp.data)
                ratio = (logp - ad.constant(logp_old)).exp()
                r_clip = ad.where(ratio.data < 1 - cfg.clip,
                                  ad.constant(np.full(ratio.shape, 1 - cfg.clip)), ratio)
                r_clip = ad.where(r_clip.data > 1 + cfg.clip,
                                  ad.constant(np.full(ratio.shape, 1 + cfg.clip)), r_clip)
                adv_c = ad.constant(adv)
                s1 = ratio * adv_c
                s2 = r_clip * adv_c
                surr = ad.where(s1.data <= s2.data, s1, s2)
                ent = gaussian_entropy_t(ls, mask)
                vloss = (val - ad.constant(ret)) ** 2
                part = (-surr - cfg.entropy_coef * ent
                        + cfg.value_coef * vloss).sum()
                total = part if total is None else total + part
            if float(np.mean(np.concatenate(kl_terms))) > 1.5 * cfg.target_kl:
                stop = True
                break
            loss = total * (1.0 / len(batch))
            loss.backward()
            losses.append(float(loss.data))
            grads = {}
            for k, tk in t.items():
                if trainable is not None and k not in trainable:
                    continue
                if tk.grad is None:
                    continue
                g = tk.grad
                if trainable is not None and trainable[k] is not None:
                    g = g * trainable[k]
                grads[k] = g
            clip_grad_norm(grads, cfg.max_grad_norm)
            if not np.isfinite(loss.data):
                raise NumericalFailureError("PPO loss is non-finite")
            opt.step(ctl.params, grads, lr_masks)
    return float(np.mean(losses))


def train_teacher(task, morphs, cfg, seed, total_steps, log=None, ctl=None):
    """PPO-lite on a dense (non-factorized) controller for one task.

    Returns the trained Controller; appends (phase, step, task, morph,
    metric, value) rows to `log` when given.
    """
    if not morphs:
        raise ContractViolationError("morph set must be non-empty")
    rng = np.random.default_rng(seed)
    if ctl is None:
        ctl = init_controller(make_config("fidelity"), rng, factorized=False)
    opt = Adam(cfg.lr)
    morphs_by_id = {m.id: m for m in morphs}
    steps = 0
    it = 0
    while steps < total_steps:
        episode_returns = []
        traj = collect_rollout(ctl, task, morphs, cfg, rng, episode_returns)
        items = gae(traj, cfg.gamma, cfg.lam)
        loss = ppo_update(ctl, task, morphs_by_id, items, cfg, opt, rng)
        steps += cfg.rollout
        it += 1
        mean_ret = float(np.mean(episode_returns)) if episode_returns else float("nan")
        if episode_returns and not np.isfinite(mean_ret):
            raise NumericalFailureError(f"mean return diverged at step {steps}")
        if log is not None:
            log.append(("teacher", steps, task.id, "-", "mean_return", mean_ret))
            log.append(("teacher", steps, task.id, "-", "loss", loss))
    return ctl


def make_policy(ctl, task):
    """obs-to-distribution callable with per-morph weight caching."""
    cache = _WeightCache(ctl, task)

    def policy(morph, obs, gobs):
        mean, ls, val = forward_np(ctl, ctl.params, cache.weights(morph),
                                   obs[None], gobs[None],
                                   np.ones((1, morph.n_limbs)))
        from .controller import ActionDistribution
        return ActionDistribution(mean[0].copy(), np.exp(ls)), float(val[0])

    return policy


def run_episode(policy, morph, task, seed, stochastic=False, rng=None):
    state, obs, gobs = envs.reset(morph, task, seed)
    total = 0.0
    done = False
    while not done:
        dist, _ = policy(morph, obs, gobs)
        if stochastic:
            act, _ = dist.sample(rng)
        else:
            act = np.clip(dist.mean, -1.0, 1.0)
        state, obs, gobs, r, done = envs.step(state, morph, task, act)
        total += r
    return total


def evaluate(policy, morphs, task, episodes, seed):
    """Deterministic (mean-action) evaluation; returns per (morph, episode) list."""
    jobs = [(m, task, np.random.SeedSequence([seed, mi, e]))
            for mi, m in enumerate(morphs) for e in range(episodes)]

    def one(job):
        m, t, ss = job
        ep_seed = int(ss.generate_state(1)[0])
        return (m.id, run_episode(policy, m, t, ep_seed))

    w = n_workers()
    if w > 1:
        with ThreadPoolExecutor(max_workers=w) as ex:
            return list(ex.map(one, jobs))
    return [one(j) for j in jobs]


# ---------------------------------------------------------------------------
# knowledge diversion (policy distillation)
# ---------------------------------------------------------------------------

def check_orthogonality(ctl, limit=ORTHO_DRIFT_LIMIT):
    worst = 0.0
    for name in ctl.cfg.matrix_shapes():
        q = ctl.fm(name).square()
        worst = max(worst, float(np.linalg.norm(q.T @ q - np.eye(q.shape[0]))))
    if worst > limit:
        raise NumericalFailureError(
            f"orthogonality drift {worst:.3e} exceeds {limit:.0e}")
    return worst


def distill_loss_t(student, t, teacher, morph, task, obs, gobs):
    """Closed-form Gaussian KL(teacher || student) + 0.5 * value MSE."""
    n = morph.n_limbs
    mask = np.ones((obs.shape[0], n))
    t_mean, t_ls, t_val = forward_np(teacher, teacher.params,
                                     materialize_weights(teacher), obs, gobs, mask)
    sig_t = compute_sigmas_t(student, t, morph, task)
    w = materialize_weights_t(student, t, sig_t)
    s_mean, s_ls, s_val = forward_t(student, t, w, obs, gobs, mask)
    kl = gaussian_kl_t(t_mean, np.exp(t_ls), s_mean, s_ls, mask)
    vmse = (s_val - ad.constant(t_val)) ** 2
    return (kl + 0.5 * vmse).mean()


def divert(teachers, morphs, dcfg, seed, profile="fidelity", log=None,
           log_every=1000, student=None):
    """Distill per-task teachers into one factorized student with gated routing.

    `teachers` maps task id -> dense Controller; the task registry supplies
    instructions.  Returns the trained student Controller.
    """
    task_ids = sorted(teachers)
    tasks = [envs.TASKS[t] for t in task_ids]
    rng = np.random.default_rng(seed)
    if student is None:
        student = init_controller(make_config(profile), rng, factorized=True)
    opt = Adam(dcfg.lr)
    buffers = {}   # (task_id, morph_id) -> dict(states, uses)
    warmup = int(dcfg.warmup_frac * dcfg.budget)

    def fill_buffer(task, morph, step):
        use_student = (step >= warmup) and (rng.random() < dcfg.beta)
        behave = make_policy(student if use_student else teachers[task.id], task)
        state, obs, gobs = envs.reset(morph, task, int(rng.integers(2**63)))
        obs_l, gobs_l = [obs], [gobs]
        done = False
        while not done:
            dist, _ = behave(morph, obs, gobs)
            act, _ = dist.sample(rng)
            state, obs, gobs, _, done = envs.step(state, morph, task, act)
            if not done:
                obs_l.append(obs)
                gobs_l.append(gobs)
        return {"obs": np.stack(obs_l), "gobs": np.stack(gobs_l), "uses": 0}

    for step in range(dcfg.budget):
        task = tasks[int(rng.integers(len(tasks)))]
        morph = morphs[int(rng.integers(len(morphs)))]
        key = (task.id, morph.id)
        if key not in buffers or buffers[key]["uses"] >= dcfg.buffer_uses:
            buffers[key] = fill_buffer(task, morph, step)
        buf = buffers[key]
        buf["uses"] += 1
        idx = rng.integers(len(buf["obs"]), size=dcfg.batch)
        obs, gobs = buf["obs"][idx], buf["gobs"][idx]
        t = student.tensors()
        loss = distill_loss_t(student, t, teachers[task.id], morph, task, obs, gobs)
        loss.backward()
        grads = {k: tk.grad for k, tk in t.items() if tk.grad is not None}
        clip_grad_norm(grads, dcfg.max_grad_norm)
        opt.step(student.params, grads)
        if (step + 1) % log_every == 0:
            check_orthogonality(student)
            if log is not None:
                log.append(("divert", step + 1, task.id, morph.id,
                            "distill_loss", float(loss.data)))
    check_orthogonality(student)
    return student


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------

def adapt_trainable_sets(ctl, task, acfg):
    """(trainable-mask dict, lr-mask dict) for tailor-focused finetuning.

    Task tailors selected by the frozen gate train at full rate, learngenes
    at a reduced rate; gates, morphology tailors, and square factors stay
    frozen.  The critic and log-std also train (PPO needs them); they are
    outside the diversion mechanism.
    """
    from .gating import embed_task, gate_logits, topk_support

    e_tau = embed_task(task.instruction)
    trainable, lr_masks = {}, {}
    for name in ctl.cfg.matrix_shapes():
        dc = ctl.cfg.dconf(name)
        gp = {k: ctl.params[f"gate.{name}.tau.{k}"] for k in ("w1", "b1", "w2", "b2")}
        support = topk_support(gate_logits(e_tau, gp), dc.k_task)
        fmat = ctl.fm(name)
        cols = np.zeros(fmat.rank)
        lg, _, tt = dc.slices()
        cols[lg] = acfg.learngene_lr_scale
        cols[tt.start + support] = 1.0
        mask = np.broadcast_to(cols, fmat.tall.shape).copy()
        key = f"fac.{name}.tall"
        trainable[key] = (mask > 0).astype(float)
        lr_masks[key] = mask
    for key in ("logstd", "value.w1", "value.b1", "value.w2", "value.b2"):
        trainable[key] = None
        lr_masks[key] = None
    return trainable, lr_masks


def adapt(ctl, task, mode, acfg, budget, seed, morphs, log=None):
    """Zero-shot or tailor-focused finetune on a (possibly unseen) task."""
    if mode not in ("zero_shot", "finetune"):
        raise ContractViolationError(f"unknown adaptation mode {mode!r}")
    if not ctl.factorized:
        raise ContractViolationError("adaptation requires a factorized checkpoint")
    task.validate()
    out = ctl.copy()
    if mode == "zero_shot" or budget <= 0:
        return out
    trainable, lr_masks = adapt_trainable_sets(out, task, acfg)
    rng = np.random.default_rng(seed)
    opt = Adam(acfg.ppo.lr)
    morphs_by_id = {m.id: m for m in morphs}
    cfg = acfg.ppo
    steps = 0
    while steps < budget:
        episode_returns = []
        traj = collect_rollout(out, task, morphs, cfg, rng, episode_returns)
        items = gae(traj, cfg.gamma, cfg.lam)
        ppo_update(out, task, morphs_by_id, items, cfg, opt, rng,
                   trainable=trainable, lr_masks=lr_masks)
        steps += cfg.rollout
        if log is not None and episode_returns:
            log.append(("transfer", steps, task.id, "-", "mean_return",
                        float(np.mean(episode_returns))))
    return out
