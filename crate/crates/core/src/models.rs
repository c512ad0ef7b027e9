//! The three networks: restricted oracle, base model, and encoder-decoder
//! language model, plus their composition plumbing.
//!
//! The oracle sees the ground-truth label and compresses it into a guiding
//! code through the VQ bottleneck. The base model maps (image tokens ++ code
//! tokens) to dense per-pixel logits. The language model predicts the code
//! from the image, autoregressively by default.


use crate::error::Result;
use crate::tasks::{EncodedLabel, TaskSpec};
use crate::tensor::{Elem, Param, ParamContainer, Tape, Tensor, Var};
use crate::transformer::{Decoder, Encoder, Linear, PatchEmbed, TransformerConfig};
use crate::util::{derive_seed, seeded_rng};
use crate::vq::{resize_code_grid, Codebook, GuidingCode};

/// Shared geometry of all three networks and the code bottleneck.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub oracle_depth: usize,
    pub base_model_depth: usize,
    pub lm_enc_depth: usize,
    pub lm_dec_depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub code_len: usize,
    pub dict_size: usize,
    pub codeword_dim: usize,
    pub dict_momentum: f64,
    pub with_encoder_ctx: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stack(self.base_model_depth).validate()?;
        if crate::vq::integer_sqrt(self.code_len).is_none() {
            return Err(crate::invalid_arg!(
                "code_len {} must be a perfect square",
                self.code_len
            ));
        }
        if self.dict_size < 2 {
            return Err(crate::invalid_arg!("dict_size must be at least 2"));
        }
        Ok(())
    }

    pub fn stack(&self, depth: usize) -> TransformerConfig {
        TransformerConfig {
            width: self.width,
            depth,
            num_heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            patch_size: self.patch_size,
            input_size: self.input_size,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Vocabulary of the language model: dictionary entries plus the
    /// begin-of-sequence symbol at index `dict_size`.
    pub fn vocab_size(&self) -> usize {
        self.dict_size + 1
    }

    pub fn bos_symbol(&self) -> usize {
        self.dict_size
    }
}

// ── restricted oracle ───────────────────────────────────────────────────

/// The restricted oracle: embeds the label, runs an encoder (optionally with
/// image-context tokens), projects to the codeword dimension, resizes the
/// grid to the code length, and quantizes.
pub struct OracleModel<T: Elem> {
    pub label_embed: Linear<T>,
    pub label_pos: Param<T>,
    pub ctx_embed: Option<PatchEmbed<T>>,
    pub encoder: Encoder<T>,
    pub to_code: Linear<T>,
    pub codebook: Codebook<T>,
    cfg: ModelConfig,
    patch_features: usize,
}

/// Everything the stage-I loss needs from one oracle pass.
pub struct OracleEncoding<T: Elem> {
    pub codes: Vec<GuidingCode>,
    /// Pre-quantization embeddings `[B, n, d]` on the tape.
    pub z_e: Var,
    /// Quantized embeddings `[B, n, d]` on the tape (straight-through).
    pub z_q: Var,
    /// Quantized values as a plain tensor.
    pub z_q_value: Tensor<T>,
    /// Pre-quantization values as a plain tensor.
    pub z_e_value: Tensor<T>,
}

impl<T: Elem> OracleModel<T> {
    pub fn init(cfg: &ModelConfig, task: &TaskSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let mut rng = seeded_rng(derive_seed(seed, "oracle", 0));
        let p2 = cfg.patch_size * cfg.patch_size;
        let cat: usize = task.categorical_channels().iter().map(|&(_, c)| c).sum();
        let patch_features = p2 * (cat + task.continuous_channels());
        let stack = cfg.stack(cfg.oracle_depth);
        let ctx_embed = cfg
            .with_encoder_ctx
            .then(|| PatchEmbed::init("oracle.ctx", &stack, task.image_channels(), &mut rng));
        Ok(Self {
            label_embed: Linear::init("oracle.label_embed", patch_features, cfg.width, &mut rng),
            label_pos: Param::new(
                "oracle.label_pos",
                Tensor::randn(&[stack.num_patches(), cfg.width], 0.02, &mut rng),
            ),
            ctx_embed,
            encoder: Encoder::init("oracle.encoder", &stack, &mut rng),
            to_code: Linear::init("oracle.to_code", cfg.width, cfg.codeword_dim, &mut rng),
            codebook: Codebook::init(
                cfg.dict_size,
                cfg.codeword_dim,
                cfg.dict_momentum,
                crate::training::USAGE_WINDOW,
                &mut rng,
            )?,
            cfg: *cfg,
            patch_features,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Patch-major feature vectors for a batch of labels: per patch, the
    /// concatenation over pixels of one-hot class encodings (categorical
    /// channels) or raw values (continuous channels).
    pub fn label_patch_features(&self, labels: &[EncodedLabel]) -> Result<Tensor<T>> {
        let (g, p) = (self.cfg.grid(), self.cfg.patch_size);
        let b = labels.len();
        let mut data = vec![T::zero(); b * g * g * self.patch_features];
        for (bi, label) in labels.iter().enumerate() {
            if (label.height, label.width) != (self.cfg.input_size, self.cfg.input_size) {
                return Err(crate::invalid_arg!(
                    "label is {}x{}, model expects {}",
                    label.height,
                    label.width,
                    self.cfg.input_size
                ));
            }
            let mut feature_offset = 0usize;
            for (classes, indices) in &label.categorical {
                for gr in 0..g {
                    for gc in 0..g {
                        let patch = gr * g + gc;
                        let base = (bi * g * g + patch) * self.patch_features + feature_offset;
                        for pr in 0..p {
                            for pc in 0..p {
                                let px = (gr * p + pr) * label.width + gc * p + pc;
                                let j = pr * p + pc;
                                data[base + j * classes + indices[px]] = T::one();
                            }
                        }
                    }
                }
                feature_offset += p * p * classes;
            }
            if let Some((channels, values)) = &label.continuous {
                for gr in 0..g {
                    for gc in 0..g {
                        let patch = gr * g + gc;
                        let base = (bi * g * g + patch) * self.patch_features + feature_offset;
                        for pr in 0..p {
                            for pc in 0..p {
                                let px = (gr * p + pr) * label.width + gc * p + pc;
                                let j = pr * p + pc;
                                for ch in 0..*channels {
                                    data[base + j * channels + ch] =
                                        T::of(values[px * channels + ch] as f64);
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(data, &[b, g * g, self.patch_features])
    }

    /// Full oracle pass on the tape: embed, encode, project, resize,
    /// quantize with the straight-through gradient contract.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        labels: &[EncodedLabel],
        images: Option<&Tensor<T>>,
    ) -> Result<OracleEncoding<T>> {
        let b = labels.len();
        let g2 = self.cfg.grid() * self.cfg.grid();
        let features = self.label_patch_features(labels)?;
        let fv = tape.constant(features);
        let projected = self.label_embed.forward(tape, fv)?;
        let pos = tape.param(&self.label_pos);
        let mut seq = tape.add(projected, pos)?;
        if let Some(ctx) = &self.ctx_embed {
            let x = images.ok_or_else(|| {
                crate::invalid_arg!("oracle configured with image context but no image given")
            })?;
            let xv = tape.constant(x.clone());
            let img_tokens = ctx.forward(tape, xv)?;
            seq = tape.concat(&[seq, img_tokens], 1)?;
        }
        let encoded = self.encoder.forward(tape, seq)?;
        let label_part = if self.ctx_embed.is_some() {
            tape.slice(encoded, 1, 0..g2)?
        } else {
            encoded
        };
        let projected = self.to_code.forward(tape, label_part)?;
        let side = self.cfg.grid();
        let grid = tape.reshape(projected, &[b, side, side, self.cfg.codeword_dim])?;
        let z_e = resize_code_grid(tape, grid, self.cfg.code_len)?;

        let z_e_value = tape.value(z_e).clone();
        let flat = z_e_value.reshaped(&[b * self.cfg.code_len, self.cfg.codeword_dim])?;
        let (flat_code, flat_zq) = self.codebook.quantize(&flat)?;
        let codes: Vec<GuidingCode> = flat_code
            .indices()
            .chunks_exact(self.cfg.code_len)
            .map(|c| GuidingCode::new(c.to_vec(), self.cfg.dict_size).expect("indices in range"))
            .collect();
        let z_q_value = flat_zq.reshaped(&[b, self.cfg.code_len, self.cfg.codeword_dim])?;
        let z_q = tape.straight_through(z_e, z_q_value.clone())?;
        Ok(OracleEncoding {
            codes,
            z_e,
            z_q,
            z_q_value,
            z_e_value,
        })
    }

    /// Value-level encoding of one label (no gradients). With the context
    /// pathway disabled this is a pure function of the label.
    pub fn encode(
        &self,
        label: &EncodedLabel,
        image: Option<&Tensor<T>>,
    ) -> Result<(GuidingCode, Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let batched = match image {
            Some(img) => {
                let mut shape = vec![1];
                shape.extend_from_slice(img.shape());
                Some(img.reshaped(&shape)?)
            }
            None => None,
        };
        let enc = self.encode_on_tape(&mut tape, std::slice::from_ref(label), batched.as_ref())?;
        let n = self.cfg.code_len;
        let d = self.cfg.codeword_dim;
        Ok((
            enc.codes.into_iter().next().unwrap(),
            enc.z_q_value.reshaped(&[n, d])?,
            enc.z_e_value.reshaped(&[n, d])?,
        ))
    }
}

impl<T: Elem> ParamContainer<T> for OracleModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.label_embed.visit(f);
        f(&self.label_pos);
        if let Some(ctx) = &self.ctx_embed {
            ctx.visit(f);
        }
        self.encoder.visit(f);
        self.to_code.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.label_embed.visit_mut(f);
        f(&mut self.label_pos);
        if let Some(ctx) = &mut self.ctx_embed {
            ctx.visit_mut(f);
        }
        self.encoder.visit_mut(f);
        self.to_code.visit_mut(f);
    }
}

// ── base model ──────────────────────────────────────────────────────────

/// The base model: image tokens and embedded code tokens concatenated into
/// one encoder sequence; per-pixel logits decoded from image-token
/// positions only.
pub struct BaseModel<T: Elem> {
    pub patch_embed: PatchEmbed<T>,
    pub code_embed: Linear<T>,
    pub code_pos: Param<T>,
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
    cfg: ModelConfig,
    logits_per_pixel: usize,
}

impl<T: Elem> BaseModel<T> {
    pub fn init(cfg: &ModelConfig, task: &TaskSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(derive_seed(seed, "base", 0));
        let stack = cfg.stack(cfg.base_model_depth);
        let p2 = cfg.patch_size * cfg.patch_size;
        let logits_per_pixel = task.logits_per_pixel();
        Ok(Self {
            patch_embed: PatchEmbed::init("base.patch", &stack, task.image_channels(), &mut rng),
            code_embed: Linear::init("base.code_embed", cfg.codeword_dim, cfg.width, &mut rng),
            code_pos: Param::new(
                "base.code_pos",
                Tensor::randn(&[cfg.code_len, cfg.width], 0.02, &mut rng),
            ),
            encoder: Encoder::init("base.encoder", &stack, &mut rng),
            head: Linear::init("base.head", cfg.width, p2 * logits_per_pixel, &mut rng),
            cfg: *cfg,
            logits_per_pixel,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Forward on the tape. `code` is `[B, n, d]`; pass `None` to run the
    /// base model without any code tokens (the no-oracle baseline).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        code: Option<Var>,
    ) -> Result<Var> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.input_size || shape[2] != self.cfg.input_size {
            return Err(crate::invalid_arg!(
                "base model expects [B, {0}, {0}, C] images, got {shape:?}",
                self.cfg.input_size
            ));
        }
        let b = shape[0];
        let xv = tape.constant(images.clone());
        let img_tokens = self.patch_embed.forward(tape, xv)?;
        let seq = match code {
            Some(code) => {
                let embedded = self.code_embed.forward(tape, code)?;
                let pos = tape.param(&self.code_pos);
                let code_tokens = tape.add(embedded, pos)?;
                tape.concat(&[img_tokens, code_tokens], 1)?
            }
            None => img_tokens,
        };
        let encoded = self.encoder.forward(tape, seq)?;
        let g = self.cfg.grid();
        let image_part = tape.slice(encoded, 1, 0..g * g)?;
        let logits = self.head.forward(tape, image_part)?;
        self.unpatchify(tape, logits, b)
    }

    /// `[B, g*g, p*p*C]` token logits back to `[B, H, W, C]` pixel logits.
    fn unpatchify(&self, tape: &mut Tape<T>, tokens: Var, b: usize) -> Result<Var> {
        let (g, p, c) = (self.cfg.grid(), self.cfg.patch_size, self.logits_per_pixel);
        let x = tape.reshape(tokens, &[b, g, g, p, p, c])?;
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(x, &[b, g * p, g * p, c])
    }

    /// Value-level forward for one image and code rows `[n, d]`.
    pub fn forward(&self, image: &Tensor<T>, code_rows: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b_image = image.reshaped(&[1, self.cfg.input_size, self.cfg.input_size, image.shape()[2]])?;
        let code = match code_rows {
            Some(rows) => {
                let expanded =
                    rows.reshaped(&[1, self.cfg.code_len, self.cfg.codeword_dim])?;
                Some(tape.constant(expanded))
            }
            None => None,
        };
        let logits = self.forward_on_tape(&mut tape, &b_image, code)?;
        let v = tape.value(logits);
        v.reshaped(&[self.cfg.input_size, self.cfg.input_size, self.logits_per_pixel])
    }
}

impl<T: Elem> ParamContainer<T> for BaseModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.patch_embed.visit(f);
        self.code_embed.visit(f);
        f(&self.code_pos);
        self.encoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.visit_mut(f);
        self.code_embed.visit_mut(f);
        f(&mut self.code_pos);
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

// ── language model ──────────────────────────────────────────────────────

/// Encoder-decoder language model over guiding codes. The vocabulary is
/// `dict_size + 1`; the extra begin-of-sequence symbol is only ever an
/// input, never emitted.
pub struct LanguageModel<T: Elem> {
    pub image_embed: PatchEmbed<T>,
    pub encoder: Encoder<T>,
    pub token_embed: Param<T>,
    pub token_pos: Param<T>,
    pub decoder: Decoder<T>,
    pub head: Linear<T>,
    cfg: ModelConfig,
    /// Non-autoregressive ablation: predict all positions in a single
    /// unmasked pass from begin-of-sequence inputs.
    pub autoregressive: bool,
}

impl<T: Elem> LanguageModel<T> {
    pub fn init(cfg: &ModelConfig, task: &TaskSpec, autoregressive: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(derive_seed(seed, "lm", 0));
        let enc_stack = cfg.stack(cfg.lm_enc_depth);
        let dec_stack = cfg.stack(cfg.lm_dec_depth);
        Ok(Self {
            image_embed: PatchEmbed::init("lm.image", &enc_stack, task.image_channels(), &mut rng),
            encoder: Encoder::init("lm.encoder", &enc_stack, &mut rng),
            token_embed: Param::new(
                "lm.token_embed",
                Tensor::randn(&[cfg.vocab_size(), cfg.width], 0.02, &mut rng),
            ),
            token_pos: Param::new(
                "lm.token_pos",
                Tensor::randn(&[cfg.code_len, cfg.width], 0.02, &mut rng),
            ),
            decoder: Decoder::init("lm.decoder", &dec_stack, &mut rng),
            head: Linear::init("lm.head", cfg.width, cfg.vocab_size(), &mut rng),
            cfg: *cfg,
            autoregressive,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Image encoder producing cross-attention memory `[B, g*g, width]`.
    pub fn encode_images(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let xv = tape.constant(images.clone());
        let tokens = self.image_embed.forward(tape, xv)?;
        self.encoder.forward(tape, tokens)
    }

    /// Teacher-forced logits `[B, n, vocab]` for full target codes. In the
    /// autoregressive mode, position k sees BOS and targets < k; in the
    /// non-autoregressive mode every position sees only BOS inputs.
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape<T>,
        memory: Var,
        codes: &[GuidingCode],
    ) -> Result<Var> {
        let n = self.cfg.code_len;
        let b = codes.len();
        let mut input_symbols = Vec::with_capacity(b * n);
        for code in codes {
            if code.len() != n {
                return Err(crate::invalid_arg!(
                    "code length {} does not match configured {}",
                    code.len(),
                    n
                ));
            }
            if self.autoregressive {
                input_symbols.push(self.cfg.bos_symbol());
                input_symbols.extend_from_slice(&code.indices()[..n - 1]);
            } else {
                input_symbols.extend(std::iter::repeat(self.cfg.bos_symbol()).take(n));
            }
        }
        self.decode_symbols(tape, memory, &input_symbols, b, n)
    }

    fn decode_symbols(
        &self,
        tape: &mut Tape<T>,
        memory: Var,
        input_symbols: &[usize],
        b: usize,
        len: usize,
    ) -> Result<Var> {
        let table = tape.param(&self.token_embed);
        let embedded = tape.gather_rows(table, input_symbols)?;
        let embedded = tape.reshape(embedded, &[b, len, self.cfg.width])?;
        let pos_full = tape.param(&self.token_pos);
        let pos = if len == self.cfg.code_len {
            pos_full
        } else {
            tape.slice(pos_full, 0, 0..len)?
        };
        let tokens = tape.add(embedded, pos)?;
        let decoded = self.decoder.forward(tape, tokens, memory, self.autoregressive)?;
        self.head.forward(tape, decoded)
    }

    /// Value-level image encoding, for reuse across sampling steps.
    pub fn encode_memory(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let batched =
            image.reshaped(&[1, self.cfg.input_size, self.cfg.input_size, image.shape()[2]])?;
        let memory = self.encode_images(&mut tape, &batched)?;
        Ok(tape.value(memory).clone())
    }

    /// Next-symbol logits over the N real symbols for one image and a code
    /// prefix (the BOS logit is masked out).
    pub fn next_logits(&self, image: &Tensor<T>, prefix: &[usize]) -> Result<Vec<T>> {
        let memory = self.encode_memory(image)?;
        self.next_logits_from_memory(&memory, prefix)
    }

    /// As `next_logits`, but against precomputed encoder memory.
    pub fn next_logits_from_memory(&self, memory_value: &Tensor<T>, prefix: &[usize]) -> Result<Vec<T>> {
        let n = self.cfg.code_len;
        if prefix.len() >= n {
            return Err(crate::invalid_arg!(
                "prefix length {} must be < code length {n}",
                prefix.len()
            ));
        }
        let mut tape = Tape::new();
        let memory = tape.constant(memory_value.clone());
        let logits = if self.autoregressive {
            let mut symbols = Vec::with_capacity(prefix.len() + 1);
            symbols.push(self.cfg.bos_symbol());
            symbols.extend_from_slice(prefix);
            let out = self.decode_symbols(&mut tape, memory, &symbols, 1, symbols.len())?;
            let last = tape.slice(out, 1, prefix.len()..prefix.len() + 1)?;
            tape.value(last).data().to_vec()
        } else {
            // Single-pass prediction: every position is independent given x.
            let symbols = vec![self.cfg.bos_symbol(); n];
            let out = self.decode_symbols(&mut tape, memory, &symbols, 1, n)?;
            let at = tape.slice(out, 1, prefix.len()..prefix.len() + 1)?;
            tape.value(at).data().to_vec()
        };
        // Mask the BOS symbol so it can never be emitted.
        Ok(logits[..self.cfg.dict_size].to_vec())
    }
}

impl<T: Elem> ParamContainer<T> for LanguageModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.image_embed.visit(f);
        self.encoder.visit(f);
        f(&self.token_embed);
        f(&self.token_pos);
        self.decoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.image_embed.visit_mut(f);
        self.encoder.visit_mut(f);
        f(&mut self.token_embed);
        f(&mut self.token_pos);
        self.decoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Convert an input image in task form to the `[H, W, 3]` tensor the models
/// consume.
pub fn image_to_tensor<T: Elem>(image: &crate::tasks::RgbImage) -> Tensor<T> {
    let data: Vec<T> = image.data.iter().map(|&v| T::of(v as f64)).collect();
    Tensor::from_vec(data, &[image.height, image.width, 3]).expect("image layout")
}

/// Stack per-example `[H, W, C]` tensors into `[B, H, W, C]`.
pub fn stack_images<T: Elem>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(crate::invalid_arg!("empty image batch"));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(crate::error::Error::ShapeMismatch {
                op: "stack_images",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::from_vec(data, &out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{task_io, SceneDataset, Split};
    use crate::tasks::{encode_label, TaskKind};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            width: 32,
            oracle_depth: 1,
            base_model_depth: 1,
            lm_enc_depth: 1,
            lm_dec_depth: 1,
            num_heads: 2,
            mlp_dim: 64,
            patch_size: 8,
            input_size: 32,
            code_len: 4,
            dict_size: 16,
            codeword_dim: 8,
            dict_momentum: 0.995,
            with_encoder_ctx: true,
        }
    }

    pub(crate) fn tiny_task() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Panoptic,
            semantic_classes: 8,
            instance_slots: 8,
            depth_bins: 32,
            max_depth: 8.0,
            depth_eval_crop: 0.8,
        }
    }

    fn example_pair(seed: u64) -> (Tensor<f32>, EncodedLabel) {
        let task = tiny_task();
        let ds = SceneDataset::new(seed, 32, task);
        let ex = ds.example(Split::Train, 0);
        let (img, label) = task_io(&task, &ex);
        (
            image_to_tensor::<f32>(&img),
            encode_label(&task, &label).unwrap(),
        )
    }

    #[test]
    fn oracle_code_length_contract() {
        let cfg = tiny_config();
        let oracle = OracleModel::<f32>::init(&cfg, &tiny_task(), 1).unwrap();
        let (img, label) = example_pair(5);
        let (code, z_q, z_e) = oracle.encode(&label, Some(&img)).unwrap();
        assert_eq!(code.len(), cfg.code_len);
        assert_eq!(z_q.shape(), &[cfg.code_len, cfg.codeword_dim]);
        assert_eq!(z_e.shape(), &[cfg.code_len, cfg.codeword_dim]);
        assert!(code.indices().iter().all(|&i| i < cfg.dict_size));
    }

    #[test]
    fn oracle_without_context_is_pure_in_the_image() {
        let mut cfg = tiny_config();
        cfg.with_encoder_ctx = false;
        let oracle = OracleModel::<f32>::init(&cfg, &tiny_task(), 2).unwrap();
        let (img_a, label) = example_pair(5);
        let (img_b, _) = example_pair(6);
        let (code_a, _, _) = oracle.encode(&label, Some(&img_a)).unwrap();
        let (code_b, _, _) = oracle.encode(&label, Some(&img_b)).unwrap();
        let (code_c, _, _) = oracle.encode(&label, None).unwrap();
        assert_eq!(code_a, code_b);
        assert_eq!(code_a, code_c);
    }

    #[test]
    fn oracle_with_context_requires_image() {
        let cfg = tiny_config();
        let oracle = OracleModel::<f32>::init(&cfg, &tiny_task(), 3).unwrap();
        let (_, label) = example_pair(5);
        assert!(oracle.encode(&label, None).is_err());
    }

    #[test]
    fn oracle_rejects_label_of_wrong_geometry() {
        let cfg = tiny_config();
        let oracle = OracleModel::<f32>::init(&cfg, &tiny_task(), 3).unwrap();
        let task = tiny_task();
        let ds = SceneDataset::new(4, 16, task);
        let ex = ds.example(Split::Train, 0);
        let (_, label) = task_io(&task, &ex);
        let enc = encode_label(&task, &label).unwrap();
        assert!(oracle.encode(&enc, None).is_err());
    }

    #[test]
    fn base_forward_logits_shape_contract() {
        let cfg = tiny_config();
        let task = tiny_task();
        let base = BaseModel::<f32>::init(&cfg, &task, 4).unwrap();
        let (img, _) = example_pair(5);
        let code_rows = Tensor::zeros(&[cfg.code_len, cfg.codeword_dim]);
        let logits = base.forward(&img, Some(&code_rows)).unwrap();
        assert_eq!(
            logits.shape(),
            &[32, 32, task.logits_per_pixel()],
            "per-pixel logits cover semantic and instance channels"
        );
        // All-zero code (full dropout) still yields valid-shape logits.
        assert!(logits.all_finite());
    }

    #[test]
    fn base_forward_without_code_tokens() {
        let cfg = tiny_config();
        let task = tiny_task();
        let base = BaseModel::<f32>::init(&cfg, &task, 4).unwrap();
        let (img, _) = example_pair(5);
        let logits = base.forward(&img, None).unwrap();
        assert_eq!(logits.shape(), &[32, 32, task.logits_per_pixel()]);
    }

    #[test]
    fn base_forward_is_deterministic() {
        let cfg = tiny_config();
        let base = BaseModel::<f32>::init(&cfg, &tiny_task(), 4).unwrap();
        let (img, _) = example_pair(5);
        let rows = Tensor::randn(&[cfg.code_len, cfg.codeword_dim], 1.0, &mut crate::util::seeded_rng(9));
        let a = base.forward(&img, Some(&rows)).unwrap();
        let b = base.forward(&img, Some(&rows)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lm_empty_prefix_distribution_is_well_formed() {
        let cfg = tiny_config();
        let lm = LanguageModel::<f32>::init(&cfg, &tiny_task(), true, 7).unwrap();
        let (img, _) = example_pair(5);
        let logits = lm.next_logits(&img, &[]).unwrap();
        assert_eq!(logits.len(), cfg.dict_size);
        assert!(logits.iter().all(|l| l.is_finite()));
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = logits.iter().map(|&l| (l - max).exp()).sum();
        let probs: Vec<f32> = logits.iter().map(|&l| (l - max).exp() / sum).collect();
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lm_rejects_full_length_prefix() {
        let cfg = tiny_config();
        let lm = LanguageModel::<f32>::init(&cfg, &tiny_task(), true, 7).unwrap();
        let (img, _) = example_pair(5);
        assert!(lm.next_logits(&img, &vec![0; cfg.code_len]).is_err());
    }

    #[test]
    fn lm_teacher_forced_matches_incremental() {
        let cfg = tiny_config();
        let lm = LanguageModel::<f32>::init(&cfg, &tiny_task(), true, 8).unwrap();
        let (img, _) = example_pair(5);
        let code = GuidingCode::new(vec![3, 1, 11, 7], cfg.dict_size).unwrap();

        let mut tape = Tape::new();
        let batched = img.reshaped(&[1, 32, 32, 3]).unwrap();
        let memory = lm.encode_images(&mut tape, &batched).unwrap();
        let full = lm
            .teacher_forced_logits(&mut tape, memory, std::slice::from_ref(&code))
            .unwrap();
        let full = tape.value(full).clone();

        for k in 0..cfg.code_len {
            let inc = lm.next_logits(&img, &code.indices()[..k]).unwrap();
            for (s, &iv) in inc.iter().enumerate() {
                let tf = full.data()[k * cfg.vocab_size() + s];
                assert!(
                    (tf - iv).abs() < 1e-5,
                    "position {k} symbol {s}: teacher-forced {tf} vs incremental {iv}"
                );
            }
        }
    }

    #[test]
    fn lm_prefix_extension_does_not_change_earlier_logits() {
        let cfg = tiny_config();
        let lm = LanguageModel::<f32>::init(&cfg, &tiny_task(), true, 9).unwrap();
        let (img, _) = example_pair(5);
        let a = lm.next_logits(&img, &[2]).unwrap();
        // Joint computation with a longer code: logits at position 1 are a
        // function of the prefix [2] only.
        let code = GuidingCode::new(vec![2, 5, 9, 0], cfg.dict_size).unwrap();
        let mut tape = Tape::new();
        let batched = img.reshaped(&[1, 32, 32, 3]).unwrap();
        let memory = lm.encode_images(&mut tape, &batched).unwrap();
        let full = lm
            .teacher_forced_logits(&mut tape, memory, std::slice::from_ref(&code))
            .unwrap();
        let full = tape.value(full).clone();
        for (s, &av) in a.iter().enumerate() {
            let joint = full.data()[cfg.vocab_size() + s];
            assert!((joint - av).abs() < 1e-5);
        }
    }

    #[test]
    fn non_autoregressive_lm_ignores_prefix_content() {
        let cfg = tiny_config();
        let lm = LanguageModel::<f32>::init(&cfg, &tiny_task(), false, 10).unwrap();
        let (img, _) = example_pair(5);
        let a = lm.next_logits(&img, &[1, 2]).unwrap();
        let b = lm.next_logits(&img, &[9, 14]).unwrap();
        assert_eq!(a, b, "single-pass model conditions on the image only");
    }
}
