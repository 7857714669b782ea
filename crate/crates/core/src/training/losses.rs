use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, PolicyStates, RewardTransformer};
use crate::tensor;
use crate::trajectory::PreferencePair;

/// `−log σ(m_w − m_l)`.
pub fn bt_from_means(chosen_mean: f64, rejected_mean: f64) -> f64 {
    -tensor::log_sigmoid(chosen_mean - rejected_mean)
}

fn check_response(prompt_len: usize, total: usize) -> Result<()> {
    if total <= prompt_len {
        return Err(Error::contract("response is empty"));
    }
    if prompt_len == 0 {
        return Err(Error::contract("prompt is empty"));
    }
    Ok(())
}

/// Mean of a `T × 1` reward column over the response rows.
pub(crate) fn response_mean(g: &mut Graph, rewards: Var, prompt_len: usize, total: usize) -> Result<Var> {
    check_response(prompt_len, total)?;
    let r = g.slice_rows(rewards, prompt_len, total)?;
    g.mean(r)
}

fn bt_from_vars(g: &mut Graph, chosen_mean: Var, rejected_mean: Var) -> Result<Var> {
    let diff = g.sub(chosen_mean, rejected_mean)?;
    let ls = g.log_sigmoid(diff);
    Ok(g.neg(ls))
}

/// Token-averaged Bradley-Terry loss of `pair` under the model's reward
/// outputs.
pub fn bt_loss(model: &RewardTransformer, pair: &PreferencePair) -> Result<f64> {
    let p = pair.prompt.len();
    let mean = |tokens: Vec<u32>| -> Result<f64> {
        check_response(p, tokens.len())?;
        let (_, rewards) = model.forward(&tokens)?;
        let r = &rewards[p..];
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    };
    Ok(bt_from_means(mean(pair.chosen_tokens())?, mean(pair.rejected_tokens())?))
}

/// Records the Bradley-Terry loss over full forward passes that share
/// `params`.
pub fn bt_loss_graph(model: &RewardTransformer, g: &mut Graph, params: &BoundParams, pair: &PreferencePair) -> Result<Var> {
    let p = pair.prompt.len();
    let w = pair.chosen_tokens();
    let l = pair.rejected_tokens();
    let (_, rw) = model.graph_forward_with(g, params, &w)?;
    let mw = response_mean(g, rw, p, w.len())?;
    let (_, rl) = model.graph_forward_with(g, params, &l)?;
    let ml = response_mean(g, rl, p, l.len())?;
    bt_from_vars(g, mw, ml)
}

/// Bradley-Terry loss through the reward channel only, over frozen policy
/// activations of the chosen and rejected sequences.
pub(crate) fn bt_loss_states(
    model: &RewardTransformer,
    g: &mut Graph,
    params: &BoundParams,
    prompt_len: usize,
    chosen: &PolicyStates,
    rejected: &PolicyStates,
) -> Result<Var> {
    let rw = model.graph_reward_forward(g, params, chosen)?;
    let mw = response_mean(g, rw, prompt_len, chosen.len())?;
    let rl = model.graph_reward_forward(g, params, rejected)?;
    let ml = response_mean(g, rl, prompt_len, rejected.len())?;
    bt_from_vars(g, mw, ml)
}

pub(crate) fn bt_loss_adapter(g: &mut Graph, prompt_len: usize, chosen: (Var, usize), rejected: (Var, usize)) -> Result<Var> {
    let mw = response_mean(g, chosen.0, prompt_len, chosen.1)?;
    let ml = response_mean(g, rejected.0, prompt_len, rejected.1)?;
    bt_from_vars(g, mw, ml)
}

/// Per-token log-probabilities of the response tokens, `R` entries.
fn response_log_probs(model: &RewardTransformer, g: &mut Graph, params: &BoundParams, prompt_len: usize, tokens: &[u32]) -> Result<Var> {
    check_response(prompt_len, tokens.len())?;
    let t = tokens.len();
    let (logits, _) = model.graph_forward_with(g, params, &tokens[..t - 1])?;
    let lp = g.log_softmax(logits);
    let rows = g.slice_rows(lp, prompt_len - 1, t - 1)?;
    let targets: Vec<usize> = tokens[prompt_len..].iter().map(|&x| x as usize).collect();
    g.pick(rows, &targets)
}

/// Mean next-token cross-entropy over the response tokens of `tokens`.
pub fn lm_loss_graph(model: &RewardTransformer, g: &mut Graph, params: &BoundParams, prompt_len: usize, tokens: &[u32]) -> Result<Var> {
    let picked = response_log_probs(model, g, params, prompt_len, tokens)?;
    let m = g.mean(picked)?;
    Ok(g.neg(m))
}

/// Summed log-probability of the response tokens.
pub fn sequence_log_prob_graph(
    model: &RewardTransformer,
    g: &mut Graph,
    params: &BoundParams,
    prompt_len: usize,
    tokens: &[u32],
) -> Result<Var> {
    let picked = response_log_probs(model, g, params, prompt_len, tokens)?;
    Ok(g.sum(picked))
}

/// Summed response log-probability without recording gradients. Bitwise
/// equal to the value of [`sequence_log_prob_graph`].
pub fn sequence_log_prob(model: &RewardTransformer, prompt_len: usize, tokens: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, |_| false);
    let v = sequence_log_prob_graph(model, &mut g, &params, prompt_len, tokens)?;
    Ok(g.value(v).data()[0])
}

/// `−log σ(β[(lπ_w − lref_w) − (lπ_l − lref_l)])`, with the reference
/// log-probabilities given as constants.
pub fn dpo_loss_graph(
    model: &RewardTransformer,
    g: &mut Graph,
    params: &BoundParams,
    pair: &PreferencePair,
    reference: (f64, f64),
    beta: f64,
) -> Result<Var> {
    let p = pair.prompt.len();
    let lw = sequence_log_prob_graph(model, g, params, p, &pair.chosen_tokens())?;
    let ll = sequence_log_prob_graph(model, g, params, p, &pair.rejected_tokens())?;
    let ratio_w = g.add_scalar(lw, -reference.0);
    let ratio_l = g.add_scalar(ll, -reference.1);
    let z = g.sub(ratio_w, ratio_l)?;
    let z = g.scale(z, beta);
    let ls = g.log_sigmoid(z);
    Ok(g.neg(ls))
}
