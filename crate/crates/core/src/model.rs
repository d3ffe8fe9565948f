//! The full differentiable pipeline: two estimated views, their classifiers,
//! the fused view with its classifier, and the MI estimator on top.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::estimator::{self, check_mu, BlendPlan, EstimatorParams};
use crate::fusion::{self, ClassifierDropout, ClassifierParams, FusePlan, FusionConfig, FusionVariant};
use crate::mi::{self, MiParams, ViewId};
use crate::ndiff::{Bound, GcnPlan, Group, ParamSet, Tape, Tensor, Var};
use crate::views::{ScopeSet, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_es: usize,
    pub d_mi: usize,
    pub mu: [f64; 2],
    pub fusion: FusionConfig,
    pub tau: f64,
    /// Add the identity before normalizing inside every GCN layer.
    pub self_loops: bool,
    /// Dropout on the estimator embeddings, used during Ω steps only.
    pub ve_drop: f64,
    /// Dropout on classifier inputs and hidden units, used during Θ steps only.
    pub cls_drop: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            d_es: 16,
            d_mi: 16,
            mu: [0.5, 0.5],
            fusion: FusionConfig::default(),
            tau: 0.5,
            self_loops: true,
            ve_drop: 0.5,
            cls_drop: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for mu in self.mu {
            check_mu(mu)?;
        }
        self.fusion.validate()?;
        if !(self.tau > 0.0) {
            return arg(format!("tau must be positive, got {}", self.tau));
        }
        for (name, p) in [("ve_drop", self.ve_drop), ("cls_drop", self.cls_drop)] {
            if !(0.0..1.0).contains(&p) {
                return arg(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if self.hidden == 0 || self.d_es == 0 || self.d_mi == 0 {
            return arg("layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Branch {
    view: View,
    scope: ScopeSet,
    base_plan: GcnPlan,
    blend: BlendPlan,
    es_plan: GcnPlan,
}

/// Index of the three classifiers.
pub const FIRST: usize = 0;
pub const SECOND: usize = 1;
pub const FUSED: usize = 2;

/// Name of the attention gate logits (only present for the attention variant).
pub const GATE: &str = "fuse.gate";

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    features: Tensor,
    n_classes: usize,
    branches: [Branch; 2],
    fuse: FusePlan,
    star_plan: GcnPlan,
    estimators: [EstimatorParams; 2],
    classifiers: [ClassifierParams; 3],
    mi: MiParams,
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub x: Var,
    pub estimated: [Var; 2],
    pub fused: Var,
    pub beta: (Var, Var),
    /// Predictions of the first, second and fused classifiers.
    pub predictions: [Var; 3],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub estimator_dropout: bool,
    pub classifier_dropout: bool,
}

impl Model {
    pub fn new(features: Tensor, n_classes: usize, views: [View; 2], scopes: [ScopeSet; 2], cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = features.rows();
        if n_classes < 2 {
            return arg(format!("need at least 2 classes, got {n_classes}"));
        }
        let [v1, v2] = views;
        let [s1, s2] = scopes;
        let branch = |view: View, scope: ScopeSet| -> Result<Branch> {
            if view.n() != n || scope.n() != n {
                return Err(Error::Shape(format!("view/scope over {}/{} nodes, features have {n}", view.n(), scope.n())));
            }
            let base_plan = GcnPlan::new(view.pattern().clone(), cfg.self_loops)?;
            let blend = BlendPlan::new(&view, &scope)?;
            let es_plan = GcnPlan::new(blend.pattern().clone(), cfg.self_loops)?;
            Ok(Branch { view, scope, base_plan, blend, es_plan })
        };
        let b1 = branch(v1, s1)?;
        let b2 = branch(v2, s2)?;
        let fuse = FusePlan::new(b1.blend.pattern(), b2.blend.pattern())?;
        let star_plan = GcnPlan::new(fuse.pattern().clone(), cfg.self_loops)?;
        Ok(Self {
            estimators: [EstimatorParams::names("est.v1", cfg.mu[0])?, EstimatorParams::names("est.v2", cfg.mu[1])?],
            classifiers: [ClassifierParams::names("cls.v1"), ClassifierParams::names("cls.v2"), ClassifierParams::names("cls.star")],
            mi: MiParams { tau: cfg.tau },
            cfg,
            features,
            n_classes,
            branches: [b1, b2],
            fuse,
            star_plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn basic_view(&self, which: usize) -> &View {
        &self.branches[which].view
    }

    pub fn scope(&self, which: usize) -> &ScopeSet {
        &self.branches[which].scope
    }

    /// Union support of an estimated view.
    pub fn estimated_pattern(&self, which: usize) -> &Arc<crate::sparse::Pattern> {
        self.branches[which].blend.pattern()
    }

    pub fn fused_pattern(&self) -> &Arc<crate::sparse::Pattern> {
        self.fuse.pattern()
    }

    /// Glorot-initialized parameters for all three groups.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.features.cols();
        let mut p = ParamSet::new();
        for e in &self.estimators {
            e.init(&mut p, d, self.cfg.d_es, &mut rng)?;
        }
        for c in &self.classifiers {
            c.init(&mut p, d, self.cfg.hidden, self.n_classes, &mut rng)?;
        }
        if self.cfg.fusion.variant == FusionVariant::Attention {
            p.insert(GATE, Group::Theta, Tensor::zeros(1, 2))?;
        }
        self.mi.init(&mut p, d, self.cfg.d_mi, &mut rng)?;
        Ok(p)
    }

    fn dropout_mask<R: Rng>(rng: &mut R, len: usize, p: f64) -> Arc<Vec<f64>> {
        let keep = 1.0 - p;
        Arc::new((0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect())
    }

    /// Records the estimator, classifier and fusion computations.
    pub fn forward<R: Rng>(&self, tape: &mut Tape, bound: &Bound, opts: ForwardOptions, rng: &mut R) -> Result<Forward> {
        let n = self.n_nodes();
        let x = tape.constant(self.features.clone());
        let mut estimated = [x; 2];
        let mut predictions = [x; 3];
        for (b, branch) in self.branches.iter().enumerate() {
            let names = &self.estimators[b];
            let v = tape.constant(Tensor::column(branch.view.weights().to_vec()));
            let mask =
                (opts.estimator_dropout && self.cfg.ve_drop > 0.0).then(|| Self::dropout_mask(rng, n * self.cfg.d_es, self.cfg.ve_drop));
            let z = estimator::embed(tape, &branch.base_plan, v, x, bound.get(&names.gcn_weight), mask)?;
            let scores = estimator::pair_scores(tape, z, &branch.scope, bound.get(&names.pair_weight), bound.get(&names.pair_bias))?;
            let probs = estimator::estimate_probabilities(tape, scores, &branch.scope)?;
            estimated[b] = estimator::blend(tape, &branch.blend, v, probs, names.mu)?;
            predictions[b] = self.classify(tape, bound, &branch.es_plan, estimated[b], x, b, opts, rng)?;
        }
        let beta = match self.cfg.fusion.variant {
            FusionVariant::Adaptive => {
                let pi1 = fusion::confidence(tape, predictions[FIRST], &self.cfg.fusion)?;
                let pi2 = fusion::confidence(tape, predictions[SECOND], &self.cfg.fusion)?;
                fusion::fuse_weights(tape, pi1, pi2)?
            }
            FusionVariant::Average => fusion::average_weights(tape, n),
            FusionVariant::Attention => fusion::attention_weights(tape, bound.get(GATE), n)?,
        };
        let fused = fusion::fuse_views(tape, &self.fuse, estimated[0], estimated[1], beta.0, beta.1)?;
        predictions[FUSED] = self.classify(tape, bound, &self.star_plan, fused, x, FUSED, opts, rng)?;
        Ok(Forward { x, estimated, fused, beta, predictions })
    }

    #[allow(clippy::too_many_arguments)]
    fn classify<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        plan: &GcnPlan,
        view: Var,
        x: Var,
        which: usize,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let names = &self.classifiers[which];
        let dropout = if opts.classifier_dropout && self.cfg.cls_drop > 0.0 {
            let n = self.n_nodes();
            ClassifierDropout {
                input: Some(Self::dropout_mask(rng, n * self.features.cols(), self.cfg.cls_drop)),
                hidden: Some(Self::dropout_mask(rng, n * self.cfg.hidden, self.cfg.cls_drop)),
            }
        } else {
            ClassifierDropout::default()
        };
        fusion::predict(tape, plan, view, x, bound.get(&names.hidden), bound.get(&names.output), &dropout)
    }

    /// Summed cross-entropy of the three classifiers over `targets`.
    pub fn loss_cls(&self, tape: &mut Tape, fwd: &Forward, targets: &Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let a = tape.cross_entropy(fwd.predictions[FIRST], targets.clone())?;
        let b = tape.cross_entropy(fwd.predictions[SECOND], targets.clone())?;
        let c = tape.cross_entropy(fwd.predictions[FUSED], targets.clone())?;
        let ab = tape.add(a, b)?;
        tape.add(ab, c)
    }

    /// Projected MI embeddings of the fused, first and second views.
    pub fn mi_projections(&self, tape: &mut Tape, bound: &Bound, x: Var, views: [Var; 3]) -> Result<[Var; 3]> {
        let plans = [&self.star_plan, &self.branches[0].es_plan, &self.branches[1].es_plan];
        let mut out = [x; 3];
        for (k, which) in ViewId::ALL.into_iter().enumerate() {
            let h = mi::mi_embed(tape, plans[k], views[k], x, bound.get(&self.mi.encoder(which)), bound.get(&self.mi.slope(which)))?;
            out[k] = mi::project(
                tape,
                h,
                bound.get(MiParams::PROJ_W0),
                bound.get(MiParams::PROJ_B0),
                bound.get(MiParams::PROJ_W1),
                bound.get(MiParams::PROJ_B1),
            )?;
        }
        Ok(out)
    }

    /// Sum of the three pairwise InfoNCE losses and the individual terms.
    pub fn loss_mi(&self, tape: &mut Tape, bound: &Bound, fwd: &Forward, batch: &Arc<Vec<usize>>) -> Result<(Var, [Var; 3])> {
        let views = [fwd.fused, fwd.estimated[0], fwd.estimated[1]];
        let [star, first, second] = self.mi_projections(tape, bound, fwd.x, views)?;
        mi::mi_total(tape, star, first, second, batch, self.cfg.tau)
    }

    /// Dropout-free forward values, reusable while Ω and Θ stay fixed.
    pub fn frozen(&self, params: &ParamSet) -> Result<Frozen> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, &bound, ForwardOptions::default(), &mut rng)?;
        let v = |x: Var| tape.value(x).clone();
        Ok(Frozen {
            views: [v(fwd.fused), v(fwd.estimated[0]), v(fwd.estimated[1])],
            beta: v(fwd.beta.0),
            predictions: fwd.predictions.map(v),
        })
    }

    /// [`Model::loss_mi`] on views held fixed as constants.
    pub fn loss_mi_frozen(&self, tape: &mut Tape, bound: &Bound, frozen: &Frozen, batch: &Arc<Vec<usize>>) -> Result<(Var, [Var; 3])> {
        let x = tape.constant(self.features.clone());
        let views = frozen.views.clone().map(|t| tape.constant(t));
        let [star, first, second] = self.mi_projections(tape, bound, x, views)?;
        mi::mi_total(tape, star, first, second, batch, self.cfg.tau)
    }

    /// Estimated and fused views as plain [`View`]s, plus the fusion weights.
    pub fn materialize(&self, params: &ParamSet) -> Result<MaterializedViews> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, &bound, ForwardOptions::default(), &mut rng)?;
        let mk = |pattern: &Arc<crate::sparse::Pattern>, v: Var, kind| View::new(pattern.clone(), tape.value(v).data().to_vec(), kind);
        use crate::views::ViewKind;
        Ok(MaterializedViews {
            estimated: [
                mk(self.branches[0].blend.pattern(), fwd.estimated[0], ViewKind::Estimated)?,
                mk(self.branches[1].blend.pattern(), fwd.estimated[1], ViewKind::Estimated)?,
            ],
            fused: mk(self.fuse.pattern(), fwd.fused, ViewKind::Fused)?,
            beta: [tape.value(fwd.beta.0).data().to_vec(), tape.value(fwd.beta.1).data().to_vec()],
            predictions: tape.value(fwd.predictions[FUSED]).clone(),
        })
    }
}

/// Values of one dropout-free forward pass.
#[derive(Debug, Clone)]
pub struct Frozen {
    /// Fused, first estimated and second estimated view values.
    pub views: [Tensor; 3],
    /// Weight of the first view per node.
    pub beta: Tensor,
    pub predictions: [Tensor; 3],
}

#[derive(Debug, Clone)]
pub struct MaterializedViews {
    pub estimated: [View; 2],
    pub fused: View,
    pub beta: [Vec<f64>; 2],
    pub predictions: Tensor,
}
