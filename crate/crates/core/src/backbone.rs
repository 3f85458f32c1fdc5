//! Toy vision-transformer backbone: patch tokenizer, class token, positional
//! embeddings and a stack of pre-norm transformer blocks run as a prefix.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Number of blocks `L`.
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub channels: usize,
    /// Side length of the (square) input image.
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden_dim: 32,
            heads: 4,
            channels: 3,
            image_size: 16,
            patch_size: 4,
            num_classes: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return err(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.num_classes < 2 {
            return err("need at least one channel and two classes".into());
        }
        Ok(())
    }

    /// Patch tokens per image, `n`.
    pub fn num_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// Parameters of one pre-norm transformer block. Attention projections map
/// `d -> width` (`wo` maps back), the MLP maps `d -> hidden -> d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub w2: T,
}

impl<T> Block<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (name, t) in [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.w1", &self.w1),
            ("mlp.w2", &self.w2),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (name, t) in [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.w1", &mut self.w1),
            ("mlp.w2", &mut self.w2),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<Block<U>> {
        Ok(Block {
            ln1_gamma: f(&self.ln1_gamma)?,
            ln1_beta: f(&self.ln1_beta)?,
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            ln2_gamma: f(&self.ln2_gamma)?,
            ln2_beta: f(&self.ln2_beta)?,
            w1: f(&self.w1)?,
            w2: f(&self.w2)?,
        })
    }
}

/// Truncated normal (±2σ) initializer.
pub(crate) fn trunc_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::lit(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) const INIT_STD: f64 = 0.02;

impl<F: Scalar> Block<Tensor<F>> {
    /// Fresh block: LN gammas one, betas zero, projections truncated normal.
    pub fn init(d: usize, attn_width: usize, mlp_hidden: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: trunc_normal(&[d, attn_width], INIT_STD, rng),
            wk: trunc_normal(&[d, attn_width], INIT_STD, rng),
            wv: trunc_normal(&[d, attn_width], INIT_STD, rng),
            wo: trunc_normal(&[attn_width, d], INIT_STD, rng),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w1: trunc_normal(&[d, mlp_hidden], INIT_STD, rng),
            w2: trunc_normal(&[mlp_hidden, d], INIT_STD, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    /// `[patch_dim, d]`
    pub patch_embed: T,
    /// `[n + 1, d]`, row 0 for the class token.
    pub pos_embed: T,
    /// `[d]`
    pub cls_token: T,
    pub blocks: Vec<Block<T>>,
}

pub type BackboneParams<F> = Backbone<Tensor<F>>;

impl<T> Backbone<T> {
    /// Visits the tokenizer/embedding tensors only.
    pub fn visit_embeddings<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("backbone.patch_embed".into(), &self.patch_embed);
        f("backbone.pos_embed".into(), &self.pos_embed);
        f("backbone.cls_token".into(), &self.cls_token);
    }

    pub fn visit_embeddings_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("backbone.patch_embed".into(), &mut self.patch_embed);
        f("backbone.pos_embed".into(), &mut self.pos_embed);
        f("backbone.cls_token".into(), &mut self.cls_token);
    }

    pub fn block_prefix(l: usize) -> String {
        format!("backbone.blocks.{l}")
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<Backbone<U>> {
        Ok(Backbone {
            patch_embed: f(&self.patch_embed)?,
            pos_embed: f(&self.pos_embed)?,
            cls_token: f(&self.cls_token)?,
            blocks: self.blocks.iter().map(|b| b.try_map(f)).collect::<Result<_>>()?,
        })
    }
}

impl<F: Scalar> BackboneParams<F> {
    pub fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        Backbone {
            patch_embed: trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng),
            pos_embed: trunc_normal(&[cfg.seq_len(), d], INIT_STD, rng),
            cls_token: trunc_normal(&[d], INIT_STD, rng),
            blocks: (0..cfg.depth)
                .map(|_| Block::init(d, d, cfg.mlp_hidden(), rng))
                .collect(),
        }
    }
}

/// Flattens a `[C, H, W]` image into `n` patch rows of `C·p·p` values, patches
/// in row-major grid order, each patch flattened as `(channel, row, col)`.
pub fn patchify<F: Scalar>(image: &Tensor<F>, cfg: &BackboneConfig) -> Result<Vec<F>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != cfg.channels {
        return Err(Error::Config(format!(
            "expected image [{}, H, W], got {shape:?}",
            cfg.channels
        )));
    }
    let (c, h, w, p) = (shape[0], shape[1], shape[2], cfg.patch_size);
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Config(format!(
            "image {h}x{w} does not match configured side {}",
            cfg.image_size
        )));
    }
    let data = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * h * w + (py * p + y) * w + px * p;
                    out.extend_from_slice(&data[row..row + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Row indices of the class tokens in a `[B·(n+1), d]` token matrix.
pub fn class_rows(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq).collect()
}

/// Maps a batch of images to `[B·(n+1), d]` tokens: projected patches with
/// the class token at row 0 of every sample, plus positional embeddings.
pub fn tokenize<F: Scalar>(
    g: &mut Graph<F>,
    images: &[&Tensor<F>],
    params: &Backbone<Var>,
    cfg: &BackboneConfig,
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let batch = images.len();
    let n = cfg.num_tokens();
    let mut patches = Vec::with_capacity(batch * n * cfg.patch_dim());
    for img in images {
        patches.extend(patchify(img, cfg)?);
    }
    let patches = g.constant(Tensor::new(vec![batch * n, cfg.patch_dim()], patches)?)?;
    let projected = g.matmul(patches, params.patch_embed)?;
    let cls = g.gather_rows(params.cls_token, &vec![0; batch])?;
    let stacked = g.concat_rows(&[cls, projected])?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(b).chain((0..n).map(move |i| batch + b * n + i)))
        .collect();
    let tokens = g.gather_rows(stacked, &order)?;
    let pos_index: Vec<usize> = (0..batch).flat_map(|_| 0..n + 1).collect();
    let pos = g.gather_rows(params.pos_embed, &pos_index)?;
    g.add(tokens, pos)
}

/// Multi-head self-attention on `[B·seq, d]` input. Returns the output and the
/// attention node (weights readable via [`Graph::attention_probs`]).
pub fn msa_forward<F: Scalar>(
    g: &mut Graph<F>,
    z: Var,
    block: &Block<Var>,
    seq: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = g.matmul(z, block.wq)?;
    let k = g.matmul(z, block.wk)?;
    let v = g.matmul(z, block.wv)?;
    let attn = g.attention(q, k, v, seq, heads)?;
    let out = g.matmul(attn, block.wo)?;
    Ok((out, attn))
}

/// `z̄ = z + MSA(LN₁(z))`, `out = z̄ + MLP(LN₂(z̄))`. Returns `(out, attention node)`.
pub fn block_forward<F: Scalar>(
    g: &mut Graph<F>,
    z: Var,
    block: &Block<Var>,
    seq: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let eps = F::lit(LN_EPS);
    let h = g.layer_norm(z, block.ln1_gamma, block.ln1_beta, eps)?;
    let (attn_out, attn) = msa_forward(g, h, block, seq, heads)?;
    let zbar = g.add(z, attn_out)?;
    let h2 = g.layer_norm(zbar, block.ln2_gamma, block.ln2_beta, eps)?;
    let hidden = g.matmul(h2, block.w1)?;
    let act = g.gelu(hidden)?;
    let mlp = g.matmul(act, block.w2)?;
    Ok((g.add(zbar, mlp)?, attn))
}

/// Tokens around one executed block.
#[derive(Clone, Copy, Debug)]
pub struct BlockActivation {
    /// 1-based block index.
    pub block: usize,
    /// Tokens fed into the block (after any hook replacement of the previous output).
    pub input: Var,
    /// Block output before the hook runs.
    pub output: Var,
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct PrefixOutput {
    /// Tokenizer output `z⁰`.
    pub tokens: Var,
    pub blocks: Vec<BlockActivation>,
    /// Tokens after the last block and its hook.
    pub last: Var,
}

/// Tokenizes and runs blocks `1..=upto`. After block `l` the hook receives the
/// block output and returns the tokens fed to block `l + 1`.
pub fn prefix_forward<F: Scalar>(
    g: &mut Graph<F>,
    params: &Backbone<Var>,
    cfg: &BackboneConfig,
    images: &[&Tensor<F>],
    upto: usize,
    mut hook: impl FnMut(&mut Graph<F>, usize, Var) -> Result<Var>,
) -> Result<PrefixOutput> {
    if upto == 0 || upto > params.blocks.len() || upto > cfg.depth {
        return Err(Error::Budget(format!(
            "prefix of {upto} blocks with {} available",
            params.blocks.len().min(cfg.depth)
        )));
    }
    let tokens = tokenize(g, images, params, cfg)?;
    let seq = cfg.seq_len();
    let mut z = tokens;
    let mut blocks = Vec::with_capacity(upto);
    for (i, block) in params.blocks[..upto].iter().enumerate() {
        let (out, attention) = block_forward(g, z, block, seq, cfg.heads)?;
        blocks.push(BlockActivation {
            block: i + 1,
            input: z,
            output: out,
            attention,
        });
        z = hook(g, i + 1, out)?;
    }
    Ok(PrefixOutput {
        tokens,
        blocks,
        last: z,
    })
}

/// Binds parameters into a graph, as trainable leaves or constants.
pub fn bind<F: Scalar>(g: &mut Graph<F>, params: &BackboneParams<F>, trainable: bool) -> Result<Backbone<Var>> {
    params.try_map(&mut |t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}
