//! Forward pass, hand-derived backprop, rollouts, and the policy-gradient
//! surrogate.
//!
//! Per node: header affine (family segment) → `depth` tanh layers (shared) →
//! embeddings e_k and their mean g. Per step: context q = tanh(U·[e_cur; g;
//! state] + b) scores feasible action a as qᵀ·B·e_a; infeasible actions get
//! probability exactly 0.

use rand_chacha::ChaCha8Rng;
use rand::Rng;

use super::{CopSegment, GradientVector, ParamStore, Scope, STATE_DIM};
use crate::envs::{self, Instance, Solution};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// A frozen construction trace: gradient evaluation re-walks these actions
/// with the fixed weight `coeff`, so the surrogate stays differentiable in
/// the parameters alone.
#[derive(Clone, Debug)]
pub struct Episode {
    pub instance: Instance,
    pub actions: Vec<usize>,
    pub coeff: f64,
}

struct Encoded {
    rows: Vec<Vec<f64>>,
    /// levels[0] = header outputs; levels[l+1] = tanh layer l outputs.
    levels: Vec<Vec<Vec<f64>>>,
    pooled: Vec<f64>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = match bias {
            Some(b) => b[r],
            None => 0.0,
        };
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// `out[c] += Σ_r w[r,c]·y[r]`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * y[r];
        }
    }
}

/// `dw[r,c] += y[r]·x[c]`.
fn outer_acc(dw: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, yr) in y.iter().enumerate() {
        if *yr == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += yr * x[c];
        }
    }
}

fn encode(params: &ParamStore, seg: &CopSegment, instance: &Instance) -> Encoded {
    let layout = params.layout();
    let h = layout.hidden;
    let d = seg.cop.input_dim();
    let rows = envs::node_rows(instance);
    let header_w = params.slice(seg.header_w.clone());
    let header_b = params.slice(seg.header_b.clone());
    let mut level: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| matvec(header_w, h, d, x, Some(header_b)))
        .collect();
    let mut levels = vec![level.clone()];
    for l in 0..layout.depth {
        let (wr, br) = layout.enc_layer(l);
        let w = params.slice(wr);
        let b = params.slice(br);
        level = level
            .iter()
            .map(|x| {
                let mut y = matvec(w, h, h, x, Some(b));
                for v in &mut y {
                    *v = v.tanh();
                }
                y
            })
            .collect();
        levels.push(level.clone());
    }
    let a = level.len() as f64;
    let mut pooled = vec![0.0; h];
    for e in &level {
        for (p, v) in pooled.iter_mut().zip(e) {
            *p += v / a;
        }
    }
    Encoded { rows, levels, pooled }
}

struct StepEval {
    ctx: Vec<f64>,
    q: Vec<f64>,
    probs: Vec<f64>,
}

fn step_eval(
    params: &ParamStore,
    seg: &CopSegment,
    enc: &Encoded,
    cur: Option<usize>,
    scalars: [f64; STATE_DIM],
    mask: &[bool],
) -> StepEval {
    let layout = params.layout();
    let h = layout.hidden;
    let embeddings = enc.levels.last().unwrap();
    let mut ctx = vec![0.0; 2 * h + STATE_DIM];
    if let Some(c) = cur {
        ctx[..h].copy_from_slice(&embeddings[c]);
    }
    ctx[h..2 * h].copy_from_slice(&enc.pooled);
    ctx[2 * h..].copy_from_slice(&scalars);
    let mut q = matvec(
        params.slice(seg.dec_u.clone()),
        h,
        2 * h + STATE_DIM,
        &ctx,
        Some(params.slice(seg.dec_bu.clone())),
    );
    for v in &mut q {
        *v = v.tanh();
    }
    let b = params.slice(seg.dec_b.clone());
    // qᵀB once, then a dot per feasible action.
    let mut qb = vec![0.0; h];
    matvec_t_acc(b, h, h, &q, &mut qb);
    let mut logits = vec![f64::NEG_INFINITY; mask.len()];
    let mut zmax = f64::NEG_INFINITY;
    for (a, &open) in mask.iter().enumerate() {
        if !open {
            continue;
        }
        let z: f64 = qb.iter().zip(&embeddings[a]).map(|(x, y)| x * y).sum();
        logits[a] = z;
        zmax = zmax.max(z);
    }
    let mut probs = vec![0.0; mask.len()];
    let mut total = 0.0;
    for (a, &open) in mask.iter().enumerate() {
        if open {
            probs[a] = (logits[a] - zmax).exp();
            total += probs[a];
        }
    }
    for p in &mut probs {
        *p /= total;
    }
    StepEval { ctx, q, probs }
}

/// Action distribution after an action prefix. Probabilities over feasible
/// actions sum to 1; infeasible actions get exactly 0.
pub fn forward_policy(
    params: &ParamStore,
    instance: &Instance,
    partial: &[usize],
) -> Result<Vec<f64>> {
    let layout = params.layout();
    let seg = layout.segment(layout.cop_index(instance.cop())?).clone();
    let state = envs::replay(instance, partial)?;
    let mask = envs::mask_of(instance, &state);
    if !mask.iter().any(|m| *m) {
        return Err(Error::Protocol(
            "no feasible action: construction is complete".into(),
        ));
    }
    let enc = encode(params, &seg, instance);
    let eval = step_eval(
        params,
        &seg,
        &enc,
        envs::current_row(instance, &state),
        envs::state_scalars(instance, &state),
        &mask,
    );
    Ok(eval.probs)
}

fn rollout_actions(
    params: &ParamStore,
    seg: &CopSegment,
    instance: &Instance,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, f64) {
    let enc = encode(params, seg, instance);
    let mut state = envs::initial_state(instance);
    let mut actions = Vec::new();
    let mut sum_log_prob = 0.0;
    loop {
        let mask = envs::mask_of(instance, &state);
        if !mask.iter().any(|m| *m) {
            break;
        }
        let eval = step_eval(
            params,
            seg,
            &enc,
            envs::current_row(instance, &state),
            envs::state_scalars(instance, &state),
            &mask,
        );
        let action = match mode {
            DecodeMode::Greedy => {
                let mut best = usize::MAX;
                let mut bp = f64::NEG_INFINITY;
                for (a, &p) in eval.probs.iter().enumerate() {
                    if mask[a] && p > bp {
                        bp = p;
                        best = a;
                    }
                }
                best
            }
            DecodeMode::Sample => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = usize::MAX;
                for (a, &p) in eval.probs.iter().enumerate() {
                    if !mask[a] {
                        continue;
                    }
                    acc += p;
                    chosen = a;
                    if u < acc {
                        break;
                    }
                }
                chosen
            }
        };
        sum_log_prob += eval.probs[action].ln();
        actions.push(action);
        envs::apply_action(instance, &mut state, action);
    }
    (actions, sum_log_prob)
}

/// Constructs a complete feasible solution. Greedy decoding is
/// deterministic; sampled decoding draws from the step distributions.
pub fn rollout(
    params: &ParamStore,
    instance: &Instance,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Solution, f64)> {
    let layout = params.layout();
    let seg = layout.segment(layout.cop_index(instance.cop())?).clone();
    let (actions, slp) = rollout_actions(params, &seg, instance, mode, rng);
    Ok((envs::solution_from_actions(instance, &actions), slp))
}

/// Adds `coeff · ∇ log π(actions)` into `grad`; returns the log-probability
/// of the trace.
fn accumulate_episode(
    params: &ParamStore,
    seg: &CopSegment,
    instance: &Instance,
    actions: &[usize],
    coeff: f64,
    grad: &mut [f64],
) -> f64 {
    let layout = params.layout();
    let h = layout.hidden;
    let enc = encode(params, seg, instance);
    let embeddings = enc.levels.last().unwrap();
    let a_count = enc.rows.len();
    let u = params.slice(seg.dec_u.clone()).to_vec();
    let b = params.slice(seg.dec_b.clone()).to_vec();

    let mut de = vec![vec![0.0; h]; a_count];
    let mut dg = vec![0.0; h];
    let mut state = envs::initial_state(instance);
    let mut logprob = 0.0;

    for &action in actions {
        let mask = envs::mask_of(instance, &state);
        let cur = envs::current_row(instance, &state);
        let eval = step_eval(
            params,
            seg,
            &enc,
            cur,
            envs::state_scalars(instance, &state),
            &mask,
        );
        logprob += eval.probs[action].ln();

        if coeff != 0.0 {
            // d logits: coeff · (1{a=action} − p_a) on feasible actions.
            let mut r = vec![0.0; h]; // Σ_a dz_a e_a
            let mut bq = vec![0.0; h]; // Bᵀ q
            matvec_t_acc(&b, h, h, &eval.q, &mut bq);
            for a in 0..a_count {
                if !mask[a] {
                    continue;
                }
                let dz = coeff * ((a == action) as u8 as f64 - eval.probs[a]);
                if dz == 0.0 {
                    continue;
                }
                for (ri, ei) in r.iter_mut().zip(&embeddings[a]) {
                    *ri += dz * ei;
                }
                for (di, bi) in de[a].iter_mut().zip(&bq) {
                    *di += dz * bi;
                }
            }
            outer_acc(&mut grad[seg.dec_b.clone()], &eval.q, &r);
            let dq = matvec(&b, h, h, &r, None);
            let mut dm = vec![0.0; h];
            for i in 0..h {
                dm[i] = dq[i] * (1.0 - eval.q[i] * eval.q[i]);
            }
            outer_acc(&mut grad[seg.dec_u.clone()], &dm, &eval.ctx);
            for (gb, d) in grad[seg.dec_bu.clone()].iter_mut().zip(&dm) {
                *gb += d;
            }
            let mut dctx = vec![0.0; 2 * h + STATE_DIM];
            matvec_t_acc(&u, h, 2 * h + STATE_DIM, &dm, &mut dctx);
            if let Some(c) = cur {
                for (di, v) in de[c].iter_mut().zip(&dctx[..h]) {
                    *di += v;
                }
            }
            for (gi, v) in dg.iter_mut().zip(&dctx[h..2 * h]) {
                *gi += v;
            }
        }
        envs::apply_action(instance, &mut state, action);
    }

    if coeff != 0.0 {
        // Mean pooling feeds every node.
        let inv = 1.0 / a_count as f64;
        for dek in de.iter_mut() {
            for (d, g) in dek.iter_mut().zip(&dg) {
                *d += g * inv;
            }
        }
        // Encoder layers, deepest first.
        let mut dlevel = de;
        for l in (0..layout.depth).rev() {
            let (wr, br) = layout.enc_layer(l);
            let w = params.slice(wr.clone()).to_vec();
            let mut dprev = vec![vec![0.0; h]; a_count];
            for k in 0..a_count {
                let out = &enc.levels[l + 1][k];
                let mut dpre = vec![0.0; h];
                for i in 0..h {
                    dpre[i] = dlevel[k][i] * (1.0 - out[i] * out[i]);
                }
                outer_acc(&mut grad[wr.clone()], &dpre, &enc.levels[l][k]);
                for (gb, d) in grad[br.clone()].iter_mut().zip(&dpre) {
                    *gb += d;
                }
                matvec_t_acc(&w, h, h, &dpre, &mut dprev[k]);
            }
            dlevel = dprev;
        }
        let d = seg.cop.input_dim();
        for k in 0..a_count {
            outer_acc(&mut grad[seg.header_w.clone()], &dlevel[k], &enc.rows[k]);
            for (gb, v) in grad[seg.header_b.clone()].iter_mut().zip(&dlevel[k]) {
                *gb += v;
            }
        }
        let _ = d;
    }
    logprob
}

/// Loss and gradient of `Σ coeff_e · log π(actions_e) / norm` over frozen
/// episodes. This is the smooth function whose gradient equals the
/// policy-gradient estimator when `coeff` holds the advantages.
pub fn surrogate_loss_grad(
    params: &ParamStore,
    episodes: &[Episode],
    norm: f64,
) -> Result<(f64, GradientVector)> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Config("surrogate needs at least one episode".into()))?;
    let cop = first.instance.cop();
    if episodes.iter().any(|e| e.instance.cop() != cop) {
        return Err(Error::Config("episodes mix COP families".into()));
    }
    let layout = params.layout();
    let cop_index = layout.cop_index(cop)?;
    let seg = layout.segment(cop_index).clone();
    let mut grad = GradientVector::zeros(layout.total(), Scope::FullForCop(cop_index));
    let mut loss = 0.0;
    for ep in episodes {
        let lp = accumulate_episode(
            params,
            &seg,
            &ep.instance,
            &ep.actions,
            ep.coeff / norm,
            &mut grad.values,
        );
        loss += ep.coeff * lp / norm;
    }
    Ok((loss, grad))
}

/// Samples `n_rollouts` constructions per instance and freezes them as
/// episodes whose coefficients are baseline-centered signed objectives.
/// Signed cost is the objective for minimization families and its negation
/// for maximization, so descent always improves the objective.
pub fn sample_episodes(
    params: &ParamStore,
    batch: &[Instance],
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    if batch.is_empty() {
        return Err(Error::Config("batch is empty".into()));
    }
    if n_rollouts < 2 {
        return Err(Error::Config(
            "baseline needs at least two rollouts per instance".into(),
        ));
    }
    let cop = batch[0].cop();
    let layout = params.layout();
    let seg = layout.segment(layout.cop_index(cop)?).clone();
    let sign = match cop.sense() {
        crate::task::Sense::Min => 1.0,
        crate::task::Sense::Max => -1.0,
    };
    let mut episodes = Vec::with_capacity(batch.len() * n_rollouts);
    for instance in batch {
        if instance.cop() != cop {
            return Err(Error::Config("batch mixes COP families".into()));
        }
        let mut signed = Vec::with_capacity(n_rollouts);
        let mut traces = Vec::with_capacity(n_rollouts);
        for _ in 0..n_rollouts {
            let (actions, _) = rollout_actions(params, &seg, instance, DecodeMode::Sample, rng);
            let solution = envs::solution_from_actions(instance, &actions);
            let objective = envs::evaluate(instance, &solution)?;
            signed.push(sign * objective);
            traces.push(actions);
        }
        let baseline = signed.iter().sum::<f64>() / n_rollouts as f64;
        for (actions, s) in traces.into_iter().zip(signed) {
            episodes.push(Episode {
                instance: instance.clone(),
                actions,
                coeff: s - baseline,
            });
        }
    }
    Ok(episodes)
}

/// REINFORCE estimator: surrogate loss `mean[(signed − baseline) · log π]`
/// over freshly sampled episodes, with its gradient.
pub fn policy_gradient_loss(
    params: &ParamStore,
    batch: &[Instance],
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradientVector)> {
    let episodes = sample_episodes(params, batch, n_rollouts, rng)?;
    surrogate_loss_grad(params, &episodes, (batch.len() * n_rollouts) as f64)
}
