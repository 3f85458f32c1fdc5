//! The shared recurrent early-exit block.
//!
//! At every block where it runs, the Ree block appends the backbone's class
//! token to a queue headed by a learned meta token, adds a learned positional
//! row per queue slot and runs one transformer block (the same weights at
//! every depth) over the queue. Output slot 0 is added to the class token and
//! fed to the shared classifier; the last output slot replaces the class token
//! before the next backbone block.

use rand::Rng;

use crate::backbone::{
    self, block_forward, class_rows, prefix_forward, trunc_normal, Block, BlockActivation, INIT_STD,
};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelConfig};
use crate::numerics::{Graph, Scalar, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct ReeConfig {
    pub heads: usize,
    /// Total width of the Q/K/V projections, split across heads.
    pub bottleneck: usize,
    /// MLP hidden width as a multiple of the model width.
    pub mlp_ratio: f64,
}

impl Default for ReeConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            bottleneck: 16,
            mlp_ratio: 1.35,
        }
    }
}

impl ReeConfig {
    pub fn mlp_hidden(&self, d: usize) -> usize {
        ((self.mlp_ratio * d as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.bottleneck == 0 || !self.bottleneck.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "ree bottleneck {} must be a positive multiple of ree heads {}",
                self.bottleneck, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("ree mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Where exits sit and where the Ree block runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExitSchedule {
    exit_blocks: Vec<usize>,
    ree_everywhere: bool,
}

impl ExitSchedule {
    /// `exit_blocks` are 1-based, strictly increasing, and must end at `depth`.
    pub fn new(exit_blocks: Vec<usize>, depth: usize, ree_everywhere: bool) -> Result<Self> {
        if exit_blocks.is_empty() {
            return Err(Error::Schedule("no exits".into()));
        }
        if exit_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(format!(
                "exit blocks {exit_blocks:?} not strictly increasing"
            )));
        }
        if exit_blocks[0] == 0 || *exit_blocks.last().unwrap() != depth {
            return Err(Error::Schedule(format!(
                "exit blocks {exit_blocks:?} must lie in [1, {depth}] and end at {depth}"
            )));
        }
        Ok(Self {
            exit_blocks,
            ree_everywhere,
        })
    }

    /// An exit after every `k`-th block; `k` must divide `depth`.
    pub fn every(k: usize, depth: usize, ree_everywhere: bool) -> Result<Self> {
        if k == 0 || !depth.is_multiple_of(k) {
            return Err(Error::Schedule(format!("every_k={k} does not divide depth {depth}")));
        }
        Self::new((1..=depth / k).map(|i| i * k).collect(), depth, ree_everywhere)
    }

    pub fn exit_blocks(&self) -> &[usize] {
        &self.exit_blocks
    }

    pub fn ree_everywhere(&self) -> bool {
        self.ree_everywhere
    }

    pub fn depth(&self) -> usize {
        *self.exit_blocks.last().unwrap()
    }

    pub fn num_exits(&self) -> usize {
        self.exit_blocks.len()
    }

    /// 0-based exit ordinal of block `l`, if it carries an exit.
    pub fn exit_at(&self, l: usize) -> Option<usize> {
        self.exit_blocks.iter().position(|&b| b == l)
    }

    pub fn ree_runs_at(&self, l: usize) -> bool {
        self.ree_everywhere || self.exit_at(l).is_some()
    }

    /// Rows of the Ree positional table: one per queue slot.
    pub fn ree_pos_rows(&self) -> usize {
        if self.ree_everywhere {
            self.depth() + 1
        } else {
            self.num_exits() + 1
        }
    }

    /// Number of exits reachable with `budget` blocks.
    pub fn exits_within(&self, budget: usize) -> usize {
        self.exit_blocks.iter().take_while(|&&b| b <= budget).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ree<T> {
    pub block: Block<T>,
    /// `[d]`
    pub meta: T,
    /// `[slots, d]`
    pub pos: T,
}

pub type ReeParams<F> = Ree<Tensor<F>>;

impl<T> Ree<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.block.visit("ree.block", f);
        f("ree.meta".into(), &self.meta);
        f("ree.pos".into(), &self.pos);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.block.visit_mut("ree.block", f);
        f("ree.meta".into(), &mut self.meta);
        f("ree.pos".into(), &mut self.pos);
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<Ree<U>> {
        Ok(Ree {
            block: self.block.try_map(f)?,
            meta: f(&self.meta)?,
            pos: f(&self.pos)?,
        })
    }
}

impl<F: Scalar> ReeParams<F> {
    pub fn init(d: usize, cfg: &ReeConfig, schedule: &ExitSchedule, rng: &mut impl Rng) -> Self {
        Ree {
            block: Block::init(d, cfg.bottleneck, cfg.mlp_hidden(d), rng),
            meta: trunc_normal(&[d], INIT_STD, rng),
            pos: trunc_normal(&[schedule.ree_pos_rows(), d], INIT_STD, rng),
        }
    }
}

/// LayerNorm followed by a linear layer, shared by every exit.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub ln_gamma: T,
    pub ln_beta: T,
    /// `[d, K]`
    pub weight: T,
    /// `[K]`
    pub bias: T,
}

pub type ClassifierParams<F> = Classifier<Tensor<F>>;

impl<T> Classifier<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("classifier.ln.gamma".into(), &self.ln_gamma);
        f("classifier.ln.beta".into(), &self.ln_beta);
        f("classifier.weight".into(), &self.weight);
        f("classifier.bias".into(), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("classifier.ln.gamma".into(), &mut self.ln_gamma);
        f("classifier.ln.beta".into(), &mut self.ln_beta);
        f("classifier.weight".into(), &mut self.weight);
        f("classifier.bias".into(), &mut self.bias);
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<Classifier<U>> {
        Ok(Classifier {
            ln_gamma: f(&self.ln_gamma)?,
            ln_beta: f(&self.ln_beta)?,
            weight: f(&self.weight)?,
            bias: f(&self.bias)?,
        })
    }
}

impl<F: Scalar> ClassifierParams<F> {
    pub fn init(d: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Classifier {
            ln_gamma: Tensor::ones(&[d]),
            ln_beta: Tensor::zeros(&[d]),
            weight: trunc_normal(&[d, classes], INIT_STD, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }
}

/// Output of one Ree application.
#[derive(Clone, Debug)]
pub struct ReeOutput {
    /// Modulated tokens `[m_0, …, m_l]`, each `[B, d]`.
    pub tokens: Vec<Var>,
    pub attention: Var,
}

/// Runs the shared block over the queue (slot 0 is the meta token) after
/// adding positional rows `pos[0..len]`.
pub fn ree_forward<F: Scalar>(g: &mut Graph<F>, queue: &[Var], ree: &Ree<Var>, cfg: &ReeConfig) -> Result<ReeOutput> {
    let slots = queue.len();
    let pos_rows = g.value(ree.pos).rows();
    if slots == 0 || slots > pos_rows {
        return Err(Error::Schedule(format!(
            "queue of {slots} tokens with {pos_rows} positional rows"
        )));
    }
    let batch = g.value(queue[0]).rows();
    let stacked = g.concat_rows(queue)?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| (0..slots).map(move |s| s * batch + b))
        .collect();
    let seq = g.gather_rows(stacked, &order)?;
    let pos_index: Vec<usize> = (0..batch).flat_map(|_| 0..slots).collect();
    let pos = g.gather_rows(ree.pos, &pos_index)?;
    let x = g.add(seq, pos)?;
    let (y, attention) = block_forward(g, x, &ree.block, slots, cfg.heads)?;
    let tokens = (0..slots)
        .map(|s| {
            let rows: Vec<usize> = (0..batch).map(|b| b * slots + s).collect();
            g.gather_rows(y, &rows)
        })
        .collect::<Result<_>>()?;
    Ok(ReeOutput { tokens, attention })
}

/// `logits = Linear(LN(m0 + z_cls))`.
pub fn classify_exit<F: Scalar>(g: &mut Graph<F>, m0: Var, zcls: Var, cls: &Classifier<Var>) -> Result<Var> {
    let fused = g.add(m0, zcls)?;
    let h = g.layer_norm(fused, cls.ln_gamma, cls.ln_beta, F::lit(LN_EPS))?;
    let logits = g.matmul(h, cls.weight)?;
    g.add_bias(logits, cls.bias)
}

/// Replaces the class-token rows of `tokens` with `m_last`; all other rows are
/// passed through unchanged.
pub fn modulate<F: Scalar>(g: &mut Graph<F>, tokens: Var, m_last: Var, seq: usize) -> Result<Var> {
    let batch = g.value(m_last).rows();
    if g.value(tokens).rows() != batch * seq {
        return Err(Error::shape(
            "modulate",
            format!("{} token rows for batch {batch} x seq {seq}", g.value(tokens).rows()),
        ));
    }
    g.replace_rows(tokens, &class_rows(batch, seq), m_last)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardFlags {
    /// Replace the class token with the Ree output before the next block.
    pub modulation: bool,
}

impl Default for ForwardFlags {
    fn default() -> Self {
        Self { modulation: true }
    }
}

#[derive(Clone, Debug)]
pub struct ReeStep {
    /// `m_0^l`
    pub m0: Var,
    /// `m_l^l`
    pub m_last: Var,
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub activation: BlockActivation,
    /// Class token `z_cls^l` output by the block, before modulation, `[B, d]`.
    pub class_token: Var,
    pub ree: Option<ReeStep>,
    /// Tokens handed to the next block (modulated when enabled and Ree ran).
    pub next_input: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub batch: usize,
    pub seq: usize,
    /// Class-token queue, meta token first.
    pub queue: Vec<Var>,
    /// Logits `[B, K]` for each exit reached, in exit order.
    pub exit_logits: Vec<Var>,
    /// Tokenizer output.
    pub tokens: Var,
    /// Class token `z_cls^0`, `[B, d]`.
    pub initial_class_token: Var,
    pub blocks: Vec<BlockTrace>,
    /// Number of Ree applications.
    pub ree_calls: usize,
}

/// Runs the bound sub-model over a batch, applying Ree where the schedule
/// says and recording logits at every exit within the sub-model's depth.
pub fn forward_with_exits<F: Scalar>(
    g: &mut Graph<F>,
    model: &BoundModel,
    cfg: &ModelConfig,
    images: &[&Tensor<F>],
    flags: ForwardFlags,
) -> Result<ForwardTrace> {
    if images.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let budget = model.backbone.blocks.len();
    let schedule = &cfg.schedule;
    if budget == 0 || schedule.exits_within(budget) == 0 {
        return Err(Error::Budget(format!(
            "budget {budget} does not reach the first exit at block {}",
            schedule.exit_blocks()[0]
        )));
    }
    let batch = images.len();
    let seq = cfg.backbone.seq_len();
    let rows = class_rows(batch, seq);
    let meta = g.gather_rows(model.ree.meta, &vec![0; batch])?;
    let mut queue = vec![meta];
    let mut exit_logits = Vec::new();
    let mut steps: Vec<(Var, Option<ReeStep>, Var)> = Vec::with_capacity(budget);
    let mut ree_calls = 0;

    let prefix = prefix_forward(g, &model.backbone, &cfg.backbone, images, budget, |g, l, z| {
        let zcls = g.gather_rows(z, &rows)?;
        if !schedule.ree_runs_at(l) {
            steps.push((zcls, None, z));
            return Ok(z);
        }
        queue.push(zcls);
        let out = ree_forward(g, &queue, &model.ree, &cfg.ree)?;
        ree_calls += 1;
        let m0 = out.tokens[0];
        let m_last = *out.tokens.last().unwrap();
        // classification reads the class token as produced by the block
        if schedule.exit_at(l).is_some() {
            exit_logits.push(classify_exit(g, m0, zcls, &model.classifier)?);
        }
        let next = if flags.modulation {
            modulate(g, z, m_last, seq)?
        } else {
            z
        };
        steps.push((
            zcls,
            Some(ReeStep {
                m0,
                m_last,
                attention: out.attention,
            }),
            next,
        ));
        Ok(next)
    })?;

    let initial_class_token = g.gather_rows(prefix.tokens, &rows)?;
    let blocks = prefix
        .blocks
        .into_iter()
        .zip(steps)
        .map(|(activation, (class_token, ree, next_input))| BlockTrace {
            activation,
            class_token,
            ree,
            next_input,
        })
        .collect();
    Ok(ForwardTrace {
        batch,
        seq,
        queue,
        exit_logits,
        tokens: prefix.tokens,
        initial_class_token,
        blocks,
        ree_calls,
    })
}

/// Which query token an attention map was computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapVariant {
    /// Previous class token `z_cls^{l-1}`.
    X,
    /// Modulated token `m_l^l`.
    M,
    /// Classifier input `m_0^l + z_cls^l`.
    C,
}

impl MapVariant {
    pub fn tag(self) -> &'static str {
        match self {
            MapVariant::X => "x",
            MapVariant::M => "m",
            MapVariant::C => "c",
        }
    }
}

/// Head-averaged attention of a query token over the `n` patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub variant: MapVariant,
    /// `[batch][n]`
    pub weights: Vec<Vec<f64>>,
}

/// Attention of `query` (placed in the class slot) over the patch tokens fed
/// to block `l`, under block `l`'s LN₁ and MSA: first attention row without
/// its self entry, averaged over heads.
pub fn query_attention<F: Scalar>(
    g: &mut Graph<F>,
    model: &BoundModel,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    l: usize,
    query: Var,
) -> Result<Vec<Vec<f64>>> {
    let bt = trace
        .blocks
        .get(l.wrapping_sub(1))
        .ok_or_else(|| Error::Range(format!("block {l} was not executed")))?;
    let block = &model.backbone.blocks[l - 1];
    let seq = trace.seq;
    let replaced = g.replace_rows(bt.activation.input, &class_rows(trace.batch, seq), query)?;
    let h = g.layer_norm(replaced, block.ln1_gamma, block.ln1_beta, F::lit(LN_EPS))?;
    let (_, attn) = backbone::msa_forward(g, h, block, seq, cfg.backbone.heads)?;
    let probs = g.attention_probs(attn).expect("attention node");
    let heads = cfg.backbone.heads;
    let mut maps = Vec::with_capacity(trace.batch);
    for b in 0..trace.batch {
        let mut row = vec![0.0; seq - 1];
        for h in 0..heads {
            let first = &probs.data()[(b * heads + h) * seq * seq..][..seq];
            for (w, p) in row.iter_mut().zip(&first[1..]) {
                *w += p.to_f64_lossless();
            }
        }
        row.iter_mut().for_each(|w| *w /= heads as f64);
        maps.push(row);
    }
    Ok(maps)
}

/// The x/m/c attention maps for block `l`. The m and c variants exist only
/// where the Ree block ran.
pub fn attention_maps<F: Scalar>(
    g: &mut Graph<F>,
    model: &BoundModel,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    l: usize,
) -> Result<Vec<AttentionMap>> {
    if l == 0 || l > trace.blocks.len() {
        return Err(Error::Range(format!(
            "block {l} not executed ({} blocks ran)",
            trace.blocks.len()
        )));
    }
    let prev_cls = if l == 1 {
        trace.initial_class_token
    } else {
        trace.blocks[l - 2].class_token
    };
    let mut out = vec![AttentionMap {
        variant: MapVariant::X,
        weights: query_attention(g, model, cfg, trace, l, prev_cls)?,
    }];
    if let Some(step) = trace.blocks[l - 1].ree.clone() {
        out.push(AttentionMap {
            variant: MapVariant::M,
            weights: query_attention(g, model, cfg, trace, l, step.m_last)?,
        });
        let c = g.add(step.m0, trace.blocks[l - 1].class_token)?;
        out.push(AttentionMap {
            variant: MapVariant::C,
            weights: query_attention(g, model, cfg, trace, l, c)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
