use super::kernels::{
    acc_at_b, acc_col_sums, axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul,
    matmul_bias, matmul_bt, LnCache,
};
use super::{ModelParams, Real};
use crate::error::{Error, Result};
use crate::tokenspace::TokenId;

struct LayerTrace<F> {
    ln1: LnCache<F>,
    /// Normalized block input fed to the attention projection.
    attn_in: Vec<F>,
    qkv: Vec<F>,
    /// Attention probabilities, `n_heads × L × L` (upper triangle zero).
    att: Vec<F>,
    /// Concatenated head outputs before the output projection.
    heads: Vec<F>,
    ln2: LnCache<F>,
    mlp_in: Vec<F>,
    pre_act: Vec<F>,
    act: Vec<F>,
}

/// Activations cached by [`forward`] for exact backpropagation.
pub struct ForwardTrace<F> {
    ids: Vec<TokenId>,
    layers: Vec<LayerTrace<F>>,
    final_ln: LnCache<F>,
    final_out: Vec<F>,
}

impl<F> ForwardTrace<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn inputs(&self) -> &[TokenId] {
        &self.ids
    }
}

fn check_inputs<F: Real>(params: &ModelParams<F>, ids: &[TokenId]) -> Result<()> {
    let c = &params.config;
    if ids.is_empty() {
        return Err(Error::invalid("forward needs at least one token"));
    }
    if ids.len() > c.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            c.max_seq_len
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= c.vocab_size) {
        return Err(Error::InvalidToken {
            id,
            size: c.vocab_size as u32,
        });
    }
    Ok(())
}

fn causal_attention<F: Real>(qkv: &[F], len: usize, d: usize, n_heads: usize) -> (Vec<F>, Vec<F>) {
    let hd = d / n_heads;
    let scale = F::lift(1.0 / (hd as f64).sqrt());
    let mut att = vec![F::zero(); n_heads * len * len];
    let mut out = vec![F::zero(); len * d];
    for h in 0..n_heads {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        for i in 0..len {
            let q = &qkv[i * 3 * d + q_off..i * 3 * d + q_off + hd];
            let row = &mut att[(h * len + i) * len..(h * len + i) * len + i + 1];
            let mut max = F::neg_infinity();
            for (j, a) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * d + k_off..j * 3 * d + k_off + hd];
                *a = dot(q, k) * scale;
                max = max.max(*a);
            }
            let mut sum = F::zero();
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                sum += *a;
            }
            let inv = F::one() / sum;
            let y = &mut out[i * d + h * hd..i * d + h * hd + hd];
            for (j, a) in row.iter_mut().enumerate() {
                *a *= inv;
                axpy(*a, &qkv[j * 3 * d + v_off..j * 3 * d + v_off + hd], y);
            }
        }
    }
    (att, out)
}

fn attention_backward<F: Real>(
    d_heads: &[F],
    qkv: &[F],
    att: &[F],
    len: usize,
    d: usize,
    n_heads: usize,
) -> Vec<F> {
    let hd = d / n_heads;
    let scale = F::lift(1.0 / (hd as f64).sqrt());
    let mut dqkv = vec![F::zero(); len * 3 * d];
    let mut datt = vec![F::zero(); len];
    for h in 0..n_heads {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        for i in 0..len {
            let dy = &d_heads[i * d + h * hd..i * d + h * hd + hd];
            let a_row = &att[(h * len + i) * len..(h * len + i) * len + i + 1];
            let mut weighted = F::zero();
            for j in 0..=i {
                let v = &qkv[j * 3 * d + v_off..j * 3 * d + v_off + hd];
                datt[j] = dot(dy, v);
                weighted += a_row[j] * datt[j];
                axpy(a_row[j], dy, &mut dqkv[j * 3 * d + v_off..j * 3 * d + v_off + hd]);
            }
            for j in 0..=i {
                let ds = a_row[j] * (datt[j] - weighted) * scale;
                if ds == F::zero() {
                    continue;
                }
                let (k_start, q_start) = (j * 3 * d + k_off, i * 3 * d + q_off);
                for t in 0..hd {
                    let kv = qkv[k_start + t];
                    let qv = qkv[q_start + t];
                    dqkv[q_start + t] += ds * kv;
                    dqkv[k_start + t] += ds * qv;
                }
            }
        }
    }
    dqkv
}

/// Runs the transformer body; returns the final normalized hidden states.
fn body<F: Real>(params: &ModelParams<F>, ids: &[TokenId]) -> (Vec<F>, Vec<LayerTrace<F>>, LnCache<F>) {
    let c = &params.config;
    let (len, d, ff) = (ids.len(), c.d_model, c.d_ff);
    let mut x = Vec::with_capacity(len * d);
    for (pos, &id) in ids.iter().enumerate() {
        let tok = &params.token_embedding.data[id as usize * d..(id as usize + 1) * d];
        let p = &params.position_embedding.data[pos * d..(pos + 1) * d];
        x.extend(tok.iter().zip(p).map(|(&a, &b)| a + b));
    }
    let mut traces = Vec::with_capacity(c.n_layers);
    for layer in &params.layers {
        let (attn_in, ln1) = layer_norm(&x, &layer.ln1_gain.data, &layer.ln1_bias.data, d);
        let qkv = matmul_bias(&attn_in, &layer.w_qkv.data, &layer.b_qkv.data, len, d, 3 * d);
        let (att, heads) = causal_attention(&qkv, len, d, c.n_heads);
        let proj = matmul_bias(&heads, &layer.w_out.data, &layer.b_out.data, len, d, d);
        x.iter_mut().zip(&proj).for_each(|(a, &b)| *a += b);

        let (mlp_in, ln2) = layer_norm(&x, &layer.ln2_gain.data, &layer.ln2_bias.data, d);
        let pre_act = matmul_bias(&mlp_in, &layer.w_fc.data, &layer.b_fc.data, len, d, ff);
        let act: Vec<F> = pre_act.iter().map(|&v| gelu(v)).collect();
        let out = matmul_bias(&act, &layer.w_proj.data, &layer.b_proj.data, len, ff, d);
        x.iter_mut().zip(&out).for_each(|(a, &b)| *a += b);
        traces.push(LayerTrace {
            ln1,
            attn_in,
            qkv,
            att,
            heads,
            ln2,
            mlp_in,
            pre_act,
            act,
        });
    }
    let (final_out, final_ln) = layer_norm(&x, &params.final_gain.data, &params.final_bias.data, d);
    (final_out, traces, final_ln)
}

/// Causal forward pass: `L × |D|` unnormalized logits plus the trace for backward.
pub fn forward<F: Real>(params: &ModelParams<F>, ids: &[TokenId]) -> Result<(Vec<F>, ForwardTrace<F>)> {
    check_inputs(params, ids)?;
    let c = &params.config;
    let (final_out, layers, final_ln) = body(params, ids);
    let logits = matmul_bt(
        &final_out,
        &params.output_embedding().data,
        ids.len(),
        c.d_model,
        c.vocab_size,
    );
    let trace = ForwardTrace {
        ids: ids.to_vec(),
        layers,
        final_ln,
        final_out,
    };
    Ok((logits, trace))
}

/// Logits of the last position only (for decoding).
pub fn forward_last<F: Real>(params: &ModelParams<F>, ids: &[TokenId]) -> Result<Vec<F>> {
    check_inputs(params, ids)?;
    let c = &params.config;
    let (final_out, _, _) = body(params, ids);
    let last = &final_out[(ids.len() - 1) * c.d_model..];
    Ok(matmul_bt(last, &params.output_embedding().data, 1, c.d_model, c.vocab_size))
}

/// Key/value cache for decoding one token at a time.
///
/// Each [`DecodeState::push`] does the work of one new row of [`forward`] with
/// the same kernels and summation order, so its logits equal the last row of
/// a full forward pass over the same prefix.
pub struct DecodeState<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> DecodeState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let n = params.config.n_layers;
        DecodeState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the logits at its position.
    pub fn push(&mut self, params: &ModelParams<F>, id: TokenId) -> Result<Vec<F>> {
        let c = &params.config;
        if self.len >= c.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                self.len + 1,
                c.max_seq_len
            )));
        }
        if id as usize >= c.vocab_size {
            return Err(Error::InvalidToken {
                id,
                size: c.vocab_size as u32,
            });
        }
        let (d, ff, pos) = (c.d_model, c.d_ff, self.len);
        let hd = c.head_dim();
        let scale = F::lift(1.0 / (hd as f64).sqrt());
        let tok = &params.token_embedding.data[id as usize * d..(id as usize + 1) * d];
        let p = &params.position_embedding.data[pos * d..(pos + 1) * d];
        let mut x: Vec<F> = tok.iter().zip(p).map(|(&a, &b)| a + b).collect();
        let mut scores = vec![F::zero(); pos + 1];
        for (l, layer) in params.layers.iter().enumerate() {
            let (attn_in, _) = layer_norm(&x, &layer.ln1_gain.data, &layer.ln1_bias.data, d);
            let qkv = matmul_bias(&attn_in, &layer.w_qkv.data, &layer.b_qkv.data, 1, d, 3 * d);
            let (keys, values) = (&mut self.keys[l], &mut self.values[l]);
            keys.extend_from_slice(&qkv[d..2 * d]);
            values.extend_from_slice(&qkv[2 * d..3 * d]);
            let mut heads = vec![F::zero(); d];
            for h in 0..c.n_heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                let mut max = F::neg_infinity();
                for (j, a) in scores.iter_mut().enumerate() {
                    *a = dot(q, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                    max = max.max(*a);
                }
                let mut sum = F::zero();
                for a in scores.iter_mut() {
                    *a = (*a - max).exp();
                    sum += *a;
                }
                let inv = F::one() / sum;
                let y = &mut heads[h * hd..(h + 1) * hd];
                for (j, a) in scores.iter_mut().enumerate() {
                    *a *= inv;
                    axpy(*a, &values[j * d + h * hd..j * d + (h + 1) * hd], y);
                }
            }
            let proj = matmul_bias(&heads, &layer.w_out.data, &layer.b_out.data, 1, d, d);
            x.iter_mut().zip(&proj).for_each(|(a, &b)| *a += b);
            let (mlp_in, _) = layer_norm(&x, &layer.ln2_gain.data, &layer.ln2_bias.data, d);
            let pre_act = matmul_bias(&mlp_in, &layer.w_fc.data, &layer.b_fc.data, 1, d, ff);
            let act: Vec<F> = pre_act.iter().map(|&v| gelu(v)).collect();
            let out = matmul_bias(&act, &layer.w_proj.data, &layer.b_proj.data, 1, ff, d);
            x.iter_mut().zip(&out).for_each(|(a, &b)| *a += b);
        }
        let (final_out, _) = layer_norm(&x, &params.final_gain.data, &params.final_bias.data, d);
        self.len += 1;
        Ok(matmul_bt(&final_out, &params.output_embedding().data, 1, d, c.vocab_size))
    }
}

/// Parameter gradients of a scalar loss given its gradient with respect to the logits.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    logit_grads: &[F],
) -> Result<ModelParams<F>> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, logit_grads, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into<F: Real>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    logit_grads: &[F],
    grads: &mut ModelParams<F>,
) -> Result<()> {
    let c = &params.config;
    let (len, d, ff, vocab) = (trace.ids.len(), c.d_model, c.d_ff, c.vocab_size);
    if logit_grads.len() != len * vocab {
        return Err(Error::invalid(format!(
            "logit gradient has {} entries, expected {len} x {vocab}",
            logit_grads.len()
        )));
    }
    if trace.layers.len() != c.n_layers || grads.config != *c {
        return Err(Error::invalid("trace or gradient buffer does not match the model"));
    }

    let out_emb = params.output_embedding();
    let d_final = matmul(logit_grads, &out_emb.data, len, vocab, d);
    {
        let d_out_emb = match &mut grads.lm_head {
            Some(head) => &mut head.data,
            None => &mut grads.token_embedding.data,
        };
        acc_at_b(logit_grads, &trace.final_out, d_out_emb, len, vocab, d);
    }
    let mut dx = vec![F::zero(); len * d];
    layer_norm_backward(
        &d_final,
        &trace.final_ln,
        &params.final_gain.data,
        &mut grads.final_gain.data,
        &mut grads.final_bias.data,
        &mut dx,
        d,
    );

    for ((layer, lt), g) in params
        .layers
        .iter()
        .zip(&trace.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // feed-forward branch
        acc_at_b(&lt.act, &dx, &mut g.w_proj.data, len, ff, d);
        acc_col_sums(&dx, &mut g.b_proj.data, d);
        let mut d_pre = matmul_bt(&dx, &layer.w_proj.data, len, d, ff);
        d_pre
            .iter_mut()
            .zip(&lt.pre_act)
            .for_each(|(g, &x)| *g *= gelu_grad(x));
        acc_at_b(&lt.mlp_in, &d_pre, &mut g.w_fc.data, len, d, ff);
        acc_col_sums(&d_pre, &mut g.b_fc.data, ff);
        let d_mlp_in = matmul_bt(&d_pre, &layer.w_fc.data, len, ff, d);
        layer_norm_backward(
            &d_mlp_in,
            &lt.ln2,
            &layer.ln2_gain.data,
            &mut g.ln2_gain.data,
            &mut g.ln2_bias.data,
            &mut dx,
            d,
        );

        // attention branch
        acc_at_b(&lt.heads, &dx, &mut g.w_out.data, len, d, d);
        acc_col_sums(&dx, &mut g.b_out.data, d);
        let d_heads = matmul_bt(&dx, &layer.w_out.data, len, d, d);
        let dqkv = attention_backward(&d_heads, &lt.qkv, &lt.att, len, d, c.n_heads);
        acc_at_b(&lt.attn_in, &dqkv, &mut g.w_qkv.data, len, d, 3 * d);
        acc_col_sums(&dqkv, &mut g.b_qkv.data, 3 * d);
        let d_attn_in = matmul_bt(&dqkv, &layer.w_qkv.data, len, 3 * d, d);
        layer_norm_backward(
            &d_attn_in,
            &lt.ln1,
            &layer.ln1_gain.data,
            &mut g.ln1_gain.data,
            &mut g.ln1_bias.data,
            &mut dx,
            d,
        );
    }

    for (pos, &id) in trace.ids.iter().enumerate() {
        let row = &dx[pos * d..(pos + 1) * d];
        let tok = &mut grads.token_embedding.data[id as usize * d..(id as usize + 1) * d];
        tok.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        let p = &mut grads.position_embedding.data[pos * d..(pos + 1) * d];
        p.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    Ok(())
}
