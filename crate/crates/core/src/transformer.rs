//! Transformer building blocks: patch embedding, pre-norm encoder blocks,
//! and a causally masked decoder with cross-attention.
//!
//! Sequences are `[B, L, width]` tape variables throughout. All blocks are
//! pure functions of (inputs, parameters), so concurrent read-only
//! evaluation against shared parameters is safe.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Param, ParamContainer, Tape, Tensor, Var};

/// Layer-norm epsilon used across the crate.
pub const LN_EPS: f64 = 1e-6;

/// Geometry of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub width: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub input_size: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_heads == 0 {
            return Err(crate::invalid_arg!("transformer: width and heads must be positive"));
        }
        if self.width % self.num_heads != 0 {
            return Err(crate::invalid_arg!(
                "transformer: width {} not divisible by num_heads {}",
                self.width,
                self.num_heads
            ));
        }
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(crate::invalid_arg!(
                "transformer: input_size {} not divisible by patch_size {}",
                self.input_size,
                self.patch_size
            ));
        }
        Ok(())
    }

    /// Token grid edge g = input_size / patch_size.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }
}

// ── parameter bundles ───────────────────────────────────────────────────

pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Elem> Linear<T> {
    pub fn init<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }
}

impl<T: Elem> ParamContainer<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

impl<T: Elem> LayerNorm<T> {
    pub fn init(name: &str, dim: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

impl<T: Elem> ParamContainer<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    num_heads: usize,
}

impl<T: Elem> Attention<T> {
    pub fn init<R: Rng>(name: &str, width: usize, num_heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(&format!("{name}.q"), width, width, rng),
            key: Linear::init(&format!("{name}.k"), width, width, rng),
            value: Linear::init(&format!("{name}.v"), width, width, rng),
            out: Linear::init(&format!("{name}.out"), width, width, rng),
            num_heads,
        }
    }

    /// Multi-head attention of `x` over `memory`. With `causal`, query i may
    /// only attend to memory positions j <= i (shapes must then agree).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let (b, l, w) = seq_dims(tape.shape(x))?;
        let (_, m, _) = seq_dims(tape.shape(memory))?;
        let h = self.num_heads;
        let dh = w / h;

        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, memory)?;
        let v = self.value.forward(tape, memory)?;

        // [B, L, w] -> [B, H, L, dh], with the logit scale folded into q
        // (cheaper than scaling the L x M logit grid).
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
        let q = tape.reshape(q, &[b, l, h, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        // [B, M, w] -> [B, H, dh, M] so q @ k gives attention logits.
        let k = tape.reshape(k, &[b, m, h, dh])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let v = tape.reshape(v, &[b, m, h, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let logits = tape.matmul(q, k)?;
        let logits = if causal {
            if l != m {
                return Err(Error::ShapeMismatch {
                    op: "causal attention",
                    lhs: vec![b, l, w],
                    rhs: vec![b, m, w],
                });
            }
            let mask = tape.constant(causal_mask::<T>(l));
            tape.add(logits, mask)?
        } else {
            logits
        };
        let probs = tape.softmax(logits, 3)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, w])?;
        self.out.forward(tape, ctx)
    }
}

impl<T: Elem> ParamContainer<T> for Attention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Additive causal mask: 0 on and below the diagonal, -inf above. Masked
/// logits underflow to exactly zero probability after softmax, so later
/// positions cannot leak into earlier outputs even at the bit level.
fn causal_mask<T: Elem>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::from_vec(data, &[len, len]).unwrap()
}

pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Elem> Mlp<T> {
    pub fn init<R: Rng>(name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(&format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::init(&format!("{name}.fc2"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

impl<T: Elem> ParamContainer<T> for Mlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

struct EncoderBlock<T> {
    norm1: LayerNorm<T>,
    attn: Attention<T>,
    norm2: LayerNorm<T>,
    mlp: Mlp<T>,
}

/// Stack of pre-norm self-attention blocks with a final layer norm.
/// `depth = 0` is the identity.
pub struct Encoder<T> {
    blocks: Vec<EncoderBlock<T>>,
    final_norm: LayerNorm<T>,
}

impl<T: Elem> Encoder<T> {
    pub fn init<R: Rng>(name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock {
                norm1: LayerNorm::init(&format!("{name}.block{i}.norm1"), cfg.width),
                attn: Attention::init(&format!("{name}.block{i}.attn"), cfg.width, cfg.num_heads, rng),
                norm2: LayerNorm::init(&format!("{name}.block{i}.norm2"), cfg.width),
                mlp: Mlp::init(&format!("{name}.block{i}.mlp"), cfg.width, cfg.mlp_dim, rng),
            })
            .collect();
        Self {
            blocks,
            final_norm: LayerNorm::init(&format!("{name}.final_norm"), cfg.width),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, seq: Var) -> Result<Var> {
        if self.blocks.is_empty() {
            return Ok(seq);
        }
        let mut x = seq;
        for block in &self.blocks {
            let n = block.norm1.forward(tape, x)?;
            let a = block.attn.forward(tape, n, n, false)?;
            x = tape.add(x, a)?;
            let n = block.norm2.forward(tape, x)?;
            let m = block.mlp.forward(tape, n)?;
            x = tape.add(x, m)?;
        }
        self.final_norm.forward(tape, x)
    }
}

impl<T: Elem> ParamContainer<T> for Encoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for b in &self.blocks {
            b.norm1.visit(f);
            b.attn.visit(f);
            b.norm2.visit(f);
            b.mlp.visit(f);
        }
        self.final_norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.norm1.visit_mut(f);
            b.attn.visit_mut(f);
            b.norm2.visit_mut(f);
            b.mlp.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
    }
}

struct DecoderBlock<T> {
    norm1: LayerNorm<T>,
    self_attn: Attention<T>,
    norm2: LayerNorm<T>,
    cross_attn: Attention<T>,
    norm3: LayerNorm<T>,
    mlp: Mlp<T>,
}

/// Stack of pre-norm decoder blocks: causal self-attention, cross-attention
/// over memory, MLP. `depth = 0` is the identity.
pub struct Decoder<T> {
    blocks: Vec<DecoderBlock<T>>,
    final_norm: LayerNorm<T>,
}

impl<T: Elem> Decoder<T> {
    pub fn init<R: Rng>(name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| DecoderBlock {
                norm1: LayerNorm::init(&format!("{name}.block{i}.norm1"), cfg.width),
                self_attn: Attention::init(&format!("{name}.block{i}.self_attn"), cfg.width, cfg.num_heads, rng),
                norm2: LayerNorm::init(&format!("{name}.block{i}.norm2"), cfg.width),
                cross_attn: Attention::init(&format!("{name}.block{i}.cross_attn"), cfg.width, cfg.num_heads, rng),
                norm3: LayerNorm::init(&format!("{name}.block{i}.norm3"), cfg.width),
                mlp: Mlp::init(&format!("{name}.block{i}.mlp"), cfg.width, cfg.mlp_dim, rng),
            })
            .collect();
        Self {
            blocks,
            final_norm: LayerNorm::init(&format!("{name}.final_norm"), cfg.width),
        }
    }

    /// `causal` is normally true; the non-autoregressive ablation passes
    /// false to remove ordering between target positions.
    pub fn forward(&self, tape: &mut Tape<T>, targets: Var, memory: Var, causal: bool) -> Result<Var> {
        let (_, m, _) = seq_dims(tape.shape(memory))?;
        if m == 0 {
            return Err(crate::invalid_arg!("decoder: memory must hold at least one token"));
        }
        if self.blocks.is_empty() {
            return Ok(targets);
        }
        let mut x = targets;
        for block in &self.blocks {
            let n = block.norm1.forward(tape, x)?;
            let a = block.self_attn.forward(tape, n, n, causal)?;
            x = tape.add(x, a)?;
            let n = block.norm2.forward(tape, x)?;
            let c = block.cross_attn.forward(tape, n, memory, false)?;
            x = tape.add(x, c)?;
            let n = block.norm3.forward(tape, x)?;
            let mlp = block.mlp.forward(tape, n)?;
            x = tape.add(x, mlp)?;
        }
        self.final_norm.forward(tape, x)
    }
}

impl<T: Elem> ParamContainer<T> for Decoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for b in &self.blocks {
            b.norm1.visit(f);
            b.self_attn.visit(f);
            b.norm2.visit(f);
            b.cross_attn.visit(f);
            b.norm3.visit(f);
            b.mlp.visit(f);
        }
        self.final_norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.norm1.visit_mut(f);
            b.self_attn.visit_mut(f);
            b.norm2.visit_mut(f);
            b.cross_attn.visit_mut(f);
            b.norm3.visit_mut(f);
            b.mlp.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
    }
}

/// Linear projection of non-overlapping square patches plus learned
/// positional embeddings.
pub struct PatchEmbed<T> {
    pub proj: Linear<T>,
    pub pos: Param<T>,
    patch_size: usize,
    channels: usize,
}

impl<T: Elem> PatchEmbed<T> {
    pub fn init<R: Rng>(name: &str, cfg: &TransformerConfig, channels: usize, rng: &mut R) -> Self {
        let patch_dim = cfg.patch_size * cfg.patch_size * channels;
        Self {
            proj: Linear::init(&format!("{name}.proj"), patch_dim, cfg.width, rng),
            pos: Param::new(
                format!("{name}.pos"),
                Tensor::randn(&[cfg.num_patches(), cfg.width], 0.02, rng),
            ),
            patch_size: cfg.patch_size,
            channels,
        }
    }

    /// `[B, H, W, C]` image batch to `[B, g*g, width]` tokens in raster
    /// order of patches.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let tokens = self.patch_tokens(tape, images)?;
        let projected = self.proj.forward(tape, tokens)?;
        let pos = tape.param(&self.pos);
        tape.add(projected, pos)
    }

    /// Raw flattened patches `[B, g*g, p*p*C]`, before projection and
    /// positional embedding.
    pub fn patch_tokens(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(crate::invalid_arg!(
                "patchify: expected [B, H, W, {}], got {shape:?}",
                self.channels
            ));
        }
        let (b, hgt, wid, c) = (shape[0], shape[1], shape[2], shape[3]);
        let p = self.patch_size;
        if hgt != wid {
            return Err(crate::invalid_arg!("patchify: image must be square, got {hgt}x{wid}"));
        }
        if hgt % p != 0 {
            return Err(crate::invalid_arg!(
                "patchify: size {hgt} not divisible by patch size {p}"
            ));
        }
        let g = hgt / p;
        let x = tape.reshape(images, &[b, g, p, g, p, c])?;
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(x, &[b, g * g, p * p * c])
    }
}

impl<T: Elem> ParamContainer<T> for PatchEmbed<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.proj.visit(f);
        f(&self.pos);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.proj.visit_mut(f);
        f(&mut self.pos);
    }
}

pub(crate) fn seq_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(crate::invalid_arg!("expected [B, L, width] sequence, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Closed-form parameter count of one encoder stack (excluding embedders):
/// depth blocks of (4 QKVO linears + 2 norms + MLP) plus the final norm.
pub fn encoder_param_count(cfg: &TransformerConfig) -> usize {
    let w = cfg.width;
    let attn = 4 * (w * w + w);
    let norms = 2 * 2 * w;
    let mlp = w * cfg.mlp_dim + cfg.mlp_dim + cfg.mlp_dim * w + w;
    cfg.depth * (attn + norms + mlp) + 2 * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn cfg(depth: usize) -> TransformerConfig {
        TransformerConfig {
            width: 16,
            depth,
            num_heads: 2,
            mlp_dim: 32,
            patch_size: 8,
            input_size: 32,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1).validate().is_ok());
        let mut bad = cfg(1);
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = cfg(1);
        bad.input_size = 33;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_token_count_and_raster_order() {
        let mut rng = seeded_rng(1);
        let c = cfg(0);
        let embed = PatchEmbed::<f32>::init("pe", &c, 3, &mut rng);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::randn(&[1, 32, 32, 3], 1.0, &mut rng));
        let tokens = embed.forward(&mut tape, img).unwrap();
        assert_eq!(tape.shape(tokens), &[1, 16, 16]);
    }

    #[test]
    fn patchify_zero_image_gives_positional_embeddings() {
        let mut rng = seeded_rng(2);
        let c = cfg(0);
        let embed = PatchEmbed::<f64>::init("pe", &c, 3, &mut rng);
        // Bias is zero-initialized, so a zero image projects to zero and the
        // output equals the positional table exactly.
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[1, 32, 32, 3]));
        let tokens = embed.forward(&mut tape, img).unwrap();
        assert_eq!(tape.value(tokens).data(), embed.pos.value.data());
    }

    #[test]
    fn patchify_rejects_non_square_and_indivisible() {
        let mut rng = seeded_rng(3);
        let c = cfg(0);
        let embed = PatchEmbed::<f32>::init("pe", &c, 1, &mut rng);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[1, 32, 16, 1]));
        assert!(embed.forward(&mut tape, img).is_err());
        let img = tape.constant(Tensor::zeros(&[1, 36, 36, 1]));
        assert!(embed.forward(&mut tape, img).is_err());
    }

    #[test]
    fn patchify_permuting_patches_permutes_tokens() {
        let mut rng = seeded_rng(4);
        let c = cfg(0);
        let embed = PatchEmbed::<f64>::init("pe", &c, 3, &mut rng);
        let base = Tensor::randn(&[1, 32, 32, 3], 1.0, &mut rng);

        // Swap patch (0,0) with patch (1,2) in pixel space.
        let mut swapped = base.clone();
        {
            let d = swapped.data_mut();
            for py in 0..8 {
                for px in 0..8 {
                    for ch in 0..3 {
                        let a = ((py) * 32 + px) * 3 + ch;
                        let b = ((8 + py) * 32 + (16 + px)) * 3 + ch;
                        d.swap(a, b);
                    }
                }
            }
        }

        let toks = |img: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(img);
            let t = embed.patch_tokens(&mut tape, v).unwrap();
            let t = embed.proj.forward(&mut tape, t).unwrap();
            tape.value(t).data().to_vec()
        };
        let a = toks(base);
        let b = toks(swapped);
        let w = 16;
        // Patch (0,0) is token 0; patch (1,2) is token 6 on the 4x4 grid.
        assert_eq!(&a[0..w], &b[6 * w..7 * w]);
        assert_eq!(&a[6 * w..7 * w], &b[0..w]);
        for t in 0..16 {
            if t != 0 && t != 6 {
                assert_eq!(&a[t * w..(t + 1) * w], &b[t * w..(t + 1) * w], "token {t} moved");
            }
        }
    }

    #[test]
    fn encoder_depth_zero_is_identity() {
        let mut rng = seeded_rng(5);
        let enc = Encoder::<f32>::init("enc", &cfg(0), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 5, 16], 1.0, &mut rng));
        let y = enc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn encoder_preserves_sequence_shape() {
        let mut rng = seeded_rng(6);
        let enc = Encoder::<f32>::init("enc", &cfg(2), &mut rng);
        for l in [1usize, 4, 9] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[3, l, 16], 1.0, &mut rng));
            let y = enc.forward(&mut tape, x).unwrap();
            assert_eq!(tape.shape(y), &[3, l, 16]);
        }
    }

    #[test]
    fn single_head_attention_matches_brute_force() {
        let mut rng = seeded_rng(7);
        let attn = Attention::<f64>::init("attn", 4, 1, &mut rng);
        let x = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = attn.forward(&mut tape, xv, xv, false).unwrap();
        let got = tape.value(out).data().to_vec();

        // Brute force by the definition.
        let lin = |l: &Linear<f64>, row: &[f64]| -> Vec<f64> {
            let w = l.weight.value.data();
            let b = l.bias.value.data();
            (0..4)
                .map(|j| (0..4).map(|i| row[i] * w[i * 4 + j]).sum::<f64>() + b[j])
                .collect()
        };
        let rows: Vec<&[f64]> = x.data().chunks_exact(4).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.query, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.key, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.value, r)).collect();
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let ctx: Vec<f64> = (0..4)
                .map(|d| (0..2).map(|j| exps[j] / z * v[j][d]).sum())
                .collect();
            let expect = lin(&attn.out, &ctx);
            for d in 0..4 {
                assert!(
                    (got[i * 4 + d] - expect[d]).abs() < 1e-12,
                    "position {i} dim {d}: {} vs {}",
                    got[i * 4 + d],
                    expect[d]
                );
            }
        }
    }

    #[test]
    fn decoder_depth_zero_is_identity() {
        let mut rng = seeded_rng(8);
        let dec = Decoder::<f32>::init("dec", &cfg(0), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 4, 16], 1.0, &mut rng));
        let mem = tape.constant(Tensor::randn(&[1, 3, 16], 1.0, &mut rng));
        let y = dec.forward(&mut tape, x, mem, true).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn decoder_rejects_empty_memory() {
        let mut rng = seeded_rng(9);
        let dec = Decoder::<f32>::init("dec", &cfg(1), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 4, 16], 1.0, &mut rng));
        let mem = tape.constant(Tensor::zeros(&[1, 0, 16]));
        assert!(dec.forward(&mut tape, x, mem, true).is_err());
    }

    #[test]
    fn decoder_causality_is_bitwise() {
        let mut rng = seeded_rng(10);
        let dec = Decoder::<f32>::init("dec", &cfg(2), &mut rng);
        let mem = Tensor::randn(&[1, 5, 16], 1.0, &mut rng);
        let base = Tensor::randn(&[1, 6, 16], 1.0, &mut rng);

        let run = |t: Tensor<f32>| {
            let mut tape = Tape::new();
            let tv = tape.constant(t);
            let mv = tape.constant(mem.clone());
            let y = dec.forward(&mut tape, tv, mv, true).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run(base.clone());
        for i in 0..6 {
            let mut perturbed = base.clone();
            for d in 0..16 {
                perturbed.data_mut()[i * 16 + d] += 0.5;
            }
            let b = run(perturbed);
            for pos in 0..i {
                for d in 0..16 {
                    assert_eq!(
                        a[pos * 16 + d].to_bits(),
                        b[pos * 16 + d].to_bits(),
                        "perturbing {i} changed earlier position {pos}"
                    );
                }
            }
            let changed = (i * 16..6 * 16).any(|j| a[j] != b[j]);
            assert!(changed, "perturbing {i} changed nothing at or after {i}");
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut rng = seeded_rng(11);
        let c = TransformerConfig {
            width: 24,
            depth: 3,
            num_heads: 4,
            mlp_dim: 48,
            patch_size: 8,
            input_size: 32,
        };
        let enc = Encoder::<f32>::init("enc", &c, &mut rng);
        assert_eq!(enc.num_params(), encoder_param_count(&c));
    }

    #[test]
    fn encoder_is_invariant_to_batch_composition() {
        let mut rng = seeded_rng(12);
        let enc = Encoder::<f32>::init("enc", &cfg(2), &mut rng);
        let a = Tensor::randn(&[1, 4, 16], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 4, 16], 1.0, &mut rng);
        let mut batched = a.data().to_vec();
        batched.extend_from_slice(b.data());
        let both = Tensor::from_vec(batched, &[2, 4, 16]).unwrap();

        let run = |t: Tensor<f32>| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let y = enc.forward(&mut tape, v).unwrap();
            tape.value(y).data().to_vec()
        };
        let single: Vec<f32> = [run(a), run(b)].concat();
        let joint = run(both);
        for (s, j) in single.iter().zip(&joint) {
            assert!((s - j).abs() < 1e-5, "{s} vs {j}");
        }
    }
}
