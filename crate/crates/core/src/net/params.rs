use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real};
use crate::error::{Error, Result};
use crate::tokenspace::{TokenId, TokenSpace};

/// Standard deviation of freshly initialized weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrices and embeddings are decayed; biases and norm parameters are not.
    pub fn is_decayed(&self) -> bool {
        self.shape.len() >= 2
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lift(x.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    /// `d × 3d`: query, key and value projections side by side.
    pub w_qkv: Tensor<F>,
    pub b_qkv: Tensor<F>,
    pub w_out: Tensor<F>,
    pub b_out: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w_fc: Tensor<F>,
    pub b_fc: Tensor<F>,
    pub w_proj: Tensor<F>,
    pub b_proj: Tensor<F>,
}

impl<F: Real> LayerParams<F> {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        LayerParams {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w_qkv: Tensor::zeros(&[d, 3 * d]),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_out: Tensor::zeros(&[d, d]),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w_fc: Tensor::zeros(&[d, c.d_ff]),
            b_fc: Tensor::zeros(&[c.d_ff]),
            w_proj: Tensor::zeros(&[c.d_ff, d]),
            b_proj: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }
}

/// All model weights. The same type doubles as the gradient container.
///
/// `token_embedding` is stored `|D| × d`: row `v` is the embedding of token
/// `v` (a column of the `d × |D|` embedding matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_gain: Tensor<F>,
    pub final_bias: Tensor<F>,
    /// Separate output projection (`|D| × d`) when embeddings are untied.
    pub lm_head: Option<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// All-zero tensors of the right shapes (used for gradients).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        ModelParams {
            config: config.clone(),
            token_embedding: Tensor::zeros(&[config.vocab_size, d]),
            position_embedding: Tensor::zeros(&[config.max_seq_len, d]),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(config)).collect(),
            final_gain: Tensor::zeros(&[d]),
            final_bias: Tensor::zeros(&[d]),
            lm_head: (!config.tie_embeddings).then(|| Tensor::zeros(&[config.vocab_size, d])),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Tensors with their names, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        if let Some(head) = &mut self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_qkv: l.w_qkv.cast(),
                    b_qkv: l.b_qkv.cast(),
                    w_out: l.w_out.cast(),
                    b_out: l.b_out.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_fc: l.w_fc.cast(),
                    b_fc: l.b_fc.cast(),
                    w_proj: l.w_proj.cast(),
                    b_proj: l.b_proj.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            lm_head: self.lm_head.as_ref().map(Tensor::cast),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams<F>) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// Embedding rows used for output logits.
    pub(crate) fn output_embedding(&self) -> &Tensor<F> {
        self.lm_head.as_ref().unwrap_or(&self.token_embedding)
    }
}

/// Random initialization: weights `N(0, 0.02²)`, biases zero, norm gains one.
pub fn init_random<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    init_random_with_std(config, seed, INIT_STD)
}

pub fn init_random_with_std<F: Real>(
    config: &ModelConfig,
    seed: u64,
    std: f64,
) -> Result<ModelParams<F>> {
    config.validate()?;
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    for (name, t) in params.tensors_mut() {
        if t.is_decayed() {
            t.data
                .iter_mut()
                .for_each(|x| *x = F::lift(normal.sample(&mut rng)));
        } else if name.ends_with("gain") {
            t.data.iter_mut().for_each(|x| *x = F::one());
        }
    }
    Ok(params)
}

/// Every weight zero (norm gains one): the model is indifferent between tokens.
pub fn init_zeros<F: Real>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    for (name, t) in params.tensors_mut() {
        if name.ends_with("gain") {
            t.data.iter_mut().for_each(|x| *x = F::one());
        }
    }
    Ok(params)
}

/// Pairs `(base id, extended id)` for every token the base vocabulary knows.
///
/// Modality ranges map offset to offset (the base range must fit inside the
/// extended one); control tokens map by name.
pub fn pretrained_row_map(base: &TokenSpace, space: &TokenSpace) -> Result<Vec<(TokenId, TokenId)>> {
    let incompatible = |m: String| Error::IncompatibleCheckpoint(m);
    if base.text_range != space.text_range || base.alphabet != space.alphabet {
        return Err(incompatible("text ranges or alphabets differ".into()));
    }
    let mut map = Vec::with_capacity(base.total_size as usize);
    for (b, s, name) in [
        (&base.text_range, &space.text_range, "text"),
        (&base.speech_range, &space.speech_range, "speech"),
        (&base.image_range, &space.image_range, "image"),
    ] {
        if b.len() > s.len() {
            return Err(incompatible(format!("base {name} range larger than the extended one")));
        }
        map.extend((0..b.len() as TokenId).map(|i| (b.start + i, s.start + i)));
    }
    for (name, &id) in &base.control_tokens {
        let new = space
            .control_tokens
            .get(name)
            .ok_or_else(|| incompatible(format!("extended space lacks control token {name}")))?;
        map.push((id, *new));
    }
    map.sort_unstable();
    Ok(map)
}

/// Grows a model's vocabulary from `base_space` to `space`.
///
/// Rows for tokens known to the base are copied bit-exactly, new rows are
/// drawn from `N(0, 0.02²)` in id order, and every other tensor is copied.
pub fn extend_from_pretrained<F: Real>(
    base: &ModelParams<F>,
    base_space: &TokenSpace,
    space: &TokenSpace,
    seed: u64,
) -> Result<ModelParams<F>> {
    if base.config.vocab_size != base_space.vocab_size() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "base model has vocabulary {} but its manifest has {}",
            base.config.vocab_size,
            base_space.vocab_size()
        )));
    }
    let map = pretrained_row_map(base_space, space)?;
    let d = base.config.d_model;
    let vocab = space.vocab_size();
    let mut source = vec![None; vocab];
    for &(b, s) in &map {
        source[s as usize] = Some(b as usize);
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grow = |old: &Tensor<F>| {
        let mut t = Tensor::zeros(&[vocab, d]);
        for (row, src) in source.iter().enumerate() {
            let dst = &mut t.data[row * d..(row + 1) * d];
            match src {
                Some(b) => dst.copy_from_slice(&old.data[b * d..(b + 1) * d]),
                None => dst
                    .iter_mut()
                    .for_each(|x| *x = F::lift(normal.sample(&mut rng))),
            }
        }
        t
    };
    let token_embedding = grow(&base.token_embedding);
    let lm_head = base.lm_head.as_ref().map(&mut grow);
    let mut config = base.config.clone();
    config.vocab_size = vocab;
    Ok(ModelParams {
        config,
        token_embedding,
        position_embedding: base.position_embedding.clone(),
        layers: base.layers.clone(),
        final_gain: base.final_gain.clone(),
        final_bias: base.final_bias.clone(),
        lm_head,
    })
}
