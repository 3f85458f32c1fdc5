//! Global model and depth-prefix sub-models.

use rand::Rng;

use crate::backbone::{self, Backbone, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::ree::{Classifier, ClassifierParams, ExitSchedule, Ree, ReeConfig, ReeParams};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ree: ReeConfig,
    pub schedule: ExitSchedule,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ree.validate()?;
        if self.schedule.depth() != self.backbone.depth {
            return Err(Error::Config(format!(
                "schedule ends at block {} but depth is {}",
                self.schedule.depth(),
                self.backbone.depth
            )));
        }
        Ok(())
    }
}

/// Aggregation/communication unit a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Tokenizer projection, positional embedding and class token.
    Embeddings,
    /// Backbone block, 1-based.
    Block(usize),
    /// Ree block, meta token and Ree positional rows.
    Ree,
    Classifier,
}

impl ParamGroup {
    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::Embeddings | ParamGroup::Block(_))
    }
}

/// Backbone prefix plus the shared Ree block and classifier. The global model
/// carries every block; a sub-model carries the first `budget` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<F>,
    pub ree: ReeParams<F>,
    pub classifier: ClassifierParams<F>,
}

pub type GlobalModel<F> = Model<F>;
pub type SubModel<F> = Model<F>;

/// Model parameters as graph variables.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub backbone: Backbone<Var>,
    pub ree: Ree<Var>,
    pub classifier: Classifier<Var>,
}

fn visit_all<'a, T>(
    backbone: &'a Backbone<T>,
    ree: &'a Ree<T>,
    classifier: &'a Classifier<T>,
    f: &mut dyn FnMut(ParamGroup, String, &'a T),
) {
    backbone.visit_embeddings(&mut |n, t| f(ParamGroup::Embeddings, n, t));
    for (i, b) in backbone.blocks.iter().enumerate() {
        let prefix = Backbone::<T>::block_prefix(i + 1);
        b.visit(&prefix, &mut |n, t| f(ParamGroup::Block(i + 1), n, t));
    }
    ree.visit(&mut |n, t| f(ParamGroup::Ree, n, t));
    classifier.visit(&mut |n, t| f(ParamGroup::Classifier, n, t));
}

impl BoundModel {
    /// Visits variables in the same order as [`Model::visit`].
    pub fn visit(&self, f: &mut dyn FnMut(ParamGroup, String, &Var)) {
        visit_all(&self.backbone, &self.ree, &self.classifier, f);
    }
}

impl<F: Scalar> Model<F> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.hidden_dim;
        let backbone = BackboneParams::init(&config.backbone, rng);
        let ree = ReeParams::init(d, &config.ree, &config.schedule, rng);
        let classifier = ClassifierParams::init(d, config.backbone.num_classes, rng);
        Ok(Self {
            config,
            backbone,
            ree,
            classifier,
        })
    }

    /// Number of backbone blocks carried.
    pub fn budget(&self) -> usize {
        self.backbone.blocks.len()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(ParamGroup, String, &'a Tensor<F>)) {
        visit_all(&self.backbone, &self.ree, &self.classifier, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, String, &mut Tensor<F>)) {
        self.backbone
            .visit_embeddings_mut(&mut |n, t| f(ParamGroup::Embeddings, n, t));
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            let prefix = Backbone::<Tensor<F>>::block_prefix(i + 1);
            b.visit_mut(&prefix, &mut |n, t| f(ParamGroup::Block(i + 1), n, t));
        }
        self.ree.visit_mut(&mut |n, t| f(ParamGroup::Ree, n, t));
        self.classifier.visit_mut(&mut |n, t| f(ParamGroup::Classifier, n, t));
    }

    /// `(group, name, tensor)` for every parameter, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(ParamGroup, String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit(&mut |g, n, t| out.push((g, n, t)));
        out
    }

    pub fn param_count(&self, mut include: impl FnMut(ParamGroup) -> bool) -> usize {
        let mut total = 0;
        self.visit(&mut |g, _, t| {
            if include(g) {
                total += t.numel();
            }
        });
        total
    }

    /// Deep copy of blocks `1..=budget` plus every shared component.
    pub fn slice(&self, budget: usize) -> Result<SubModel<F>> {
        if budget == 0 || budget > self.budget() {
            return Err(Error::Budget(format!("budget {budget} outside [1, {}]", self.budget())));
        }
        let mut sub = self.clone();
        sub.backbone.blocks.truncate(budget);
        Ok(sub)
    }

    /// Places parameters in `g`; the backbone is bound as constants unless
    /// `train_backbone`.
    pub fn bind(&self, g: &mut Graph<F>, train_backbone: bool) -> Result<BoundModel> {
        Ok(BoundModel {
            backbone: backbone::bind(g, &self.backbone, train_backbone)?,
            ree: self.ree.try_map(&mut |t| g.param(t.clone()))?,
            classifier: self.classifier.try_map(&mut |t| g.param(t.clone()))?,
        })
    }

    /// Rebuilds the bound structure from variables listed in [`Model::visit`]
    /// order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let mut it = vars.iter().copied();
        let mut next = |_: &Tensor<F>| {
            it.next()
                .ok_or_else(|| Error::Input("fewer variables than parameters".into()))
        };
        let bound = BoundModel {
            backbone: self.backbone.try_map(&mut next)?,
            ree: self.ree.try_map(&mut next)?,
            classifier: self.classifier.try_map(&mut next)?,
        };
        if it.next().is_some() {
            return Err(Error::Input("more variables than parameters".into()));
        }
        Ok(bound)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let mut cast = |t: &Tensor<F>| -> Result<Tensor<G>> { Ok(t.cast()) };
        Model {
            config: self.config.clone(),
            backbone: self.backbone.try_map(&mut cast).expect("infallible"),
            ree: self.ree.try_map(&mut cast).expect("infallible"),
            classifier: self.classifier.try_map(&mut cast).expect("infallible"),
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, t| ok &= t.is_finite());
        ok
    }
}
