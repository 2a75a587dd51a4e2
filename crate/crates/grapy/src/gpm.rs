//! The graph pyramid module.
//!
//! For each enabled level, coarse to fine:
//!
//! 1. **aggregate**: one node per category, pooled from the current feature
//!    map over that category's predicted pixels (mean and/or max).
//! 2. **reason**: a few rounds of residual self-attention among the nodes.
//! 3. **distribute**: project refined nodes back to feature width and add
//!    each to the pixels of its category.
//!
//! The per-level outputs are concatenated with the input features and fed to
//! a prediction head.
//!
//! Category masks come from the argmax of the main-branch prediction and are
//! constants on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::{argmax_channel, LabelMap};
use crate::layers::{init_conv, prediction_head};
use crate::params::{uniform_init, Binder, ParamError, ParamStore};
use crate::tape::{Tape, Var};
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

/// Which pooled statistics form a node feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pooling {
    Average,
    Max,
    Both,
}

impl Pooling {
    pub fn width_factor(self) -> usize {
        match self {
            Pooling::Both => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Average => "ave",
            Pooling::Max => "max",
            Pooling::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ave" | "average" => Some(Pooling::Average),
            "max" => Some(Pooling::Max),
            "both" => Some(Pooling::Both),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpmConfig {
    /// Feature channels `C` of the map entering the pyramid.
    pub channels: usize,
    /// Attention rounds per level.
    pub iterations: usize,
    /// Separate attention projections per round instead of one shared pair.
    pub fresh_weights: bool,
    pub pooling: Pooling,
    /// Enabled levels, coarse to fine.
    pub levels: Vec<Level>,
}

impl Default for GpmConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            iterations: 3,
            fresh_weights: false,
            pooling: Pooling::Both,
            levels: Level::ALL.to_vec(),
        }
    }
}

impl GpmConfig {
    /// Node feature width `C_l`.
    pub fn node_channels(&self) -> usize {
        self.channels * self.pooling.width_factor()
    }

    /// Attention bottleneck width, `C_l / 8` floored, at least 1.
    pub fn bottleneck(&self) -> usize {
        (self.node_channels() / 8).max(1)
    }

    /// Channels of the fused map fed to the head.
    pub fn fused_channels(&self) -> usize {
        self.channels * (1 + self.levels.len())
    }

    pub fn level_prefix(level: Level) -> String {
        format!("gpm.level{}", level.number())
    }

    /// Logical names of the attention projection pair used in `round`.
    pub fn projection_names(&self, level: Level, round: usize) -> (String, String) {
        let p = Self::level_prefix(level);
        if self.fresh_weights {
            (format!("{p}.iter{round}.q1"), format!("{p}.iter{round}.q2"))
        } else {
            (format!("{p}.q1"), format!("{p}.q2"))
        }
    }

    pub fn out_proj_name(level: Level) -> String {
        format!("{}.out_proj", Self::level_prefix(level))
    }

    /// Registers one level's parameters.
    pub fn init_level(&self, store: &mut ParamStore, rng: &mut impl Rng, level: Level) -> Result<(), ParamError> {
        let (cl, b) = (self.node_channels(), self.bottleneck());
        let rounds = if self.fresh_weights { self.iterations } else { 1 };
        for round in 0..rounds {
            let (q1, q2) = self.projection_names(level, round);
            store.insert(q1, uniform_init(rng, &[cl, b], cl))?;
            store.insert(q2, uniform_init(rng, &[cl, b], cl))?;
        }
        // zero so a freshly enabled level starts as the identity on f
        store.insert(Self::out_proj_name(level), Tensor::zeros(&[cl, self.channels]))
    }

    /// Registers every enabled level plus the prediction head.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng, classes: usize) -> Result<(), ParamError> {
        for &level in &self.levels {
            self.init_level(store, rng, level)?;
        }
        init_conv(store, rng, "gpm.head", 1, self.fused_channels(), classes)
    }
}

/// Nodes of one pyramid level.
#[derive(Clone, Debug)]
pub struct NodeSet {
    pub level: Level,
    /// `K_l × C_l` node features.
    pub features: Var,
    pub masks: LabelMap,
    /// Whether each category claims at least one pixel.
    pub occupancy: Vec<bool>,
}

/// Output of the attention rounds at one level.
#[derive(Clone, Debug)]
pub struct Reasoning {
    pub refined: Var,
    /// Row-stochastic `K_l × K_l` attention matrix of each round.
    pub attention: Vec<Var>,
}

/// Everything computed at one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTrace {
    pub nodes: NodeSet,
    pub reasoning: Reasoning,
    /// `f_l`, the level's output feature map.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct PyramidOutput {
    /// Concatenation of the input features and every level's output.
    pub fused: Var,
    /// Per-pixel class probabilities of the pyramid head.
    pub prediction: Var,
    /// Head scores before the softmax.
    pub logits: Var,
    pub levels: Vec<LevelTrace>,
}

/// Where category masks come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    /// Argmax of the main-branch prediction (the normal mode).
    Predicted,
    /// Coarsened ground truth at the finest level.
    GroundTruth(&'a LabelMap),
    /// Explicit masks for levels 1, 2 and 3.
    Fixed(&'a [LabelMap; 3]),
}

/// Per-pixel argmax of `prediction` coarsened to `level`.
pub fn masks_from_prediction(prediction: &Tensor, taxonomy: &Taxonomy, level: Level) -> Result<LabelMap> {
    let fine = argmax_channel(prediction);
    if fine.classes() != taxonomy.num_classes(Level::Three) {
        return Err(Error::Invalid(format!(
            "prediction has {} channels, taxonomy `{}` has {} fine labels",
            fine.classes(),
            taxonomy.name(),
            taxonomy.num_classes(Level::Three)
        )));
    }
    Ok(taxonomy.coarsen(&fine, level)?)
}

/// Label map equivalent of boolean masks, provided they partition the image.
pub fn partition(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<LabelMap> {
    LabelMap::from_masks(height, width, masks).ok_or(Error::NotAPartition)
}

/// Category-aware pooling of `features` (`H×W×C`) into one node per class.
pub fn aggregate(
    tape: &mut Tape,
    features: Var,
    masks: &LabelMap,
    level: Level,
    pooling: Pooling,
) -> Result<NodeSet> {
    let node_features = match pooling {
        Pooling::Average => tape.masked_mean(features, masks)?,
        Pooling::Max => tape.masked_max(features, masks)?,
        Pooling::Both => {
            let ave = tape.masked_mean(features, masks)?;
            let max = tape.masked_max(features, masks)?;
            tape.concat(&[ave, max], 1)?
        }
    };
    Ok(NodeSet {
        level,
        features: node_features,
        masks: masks.clone(),
        occupancy: masks.histogram().iter().map(|&n| n > 0).collect(),
    })
}

/// Residual self-attention over node features `K × C_l`.
///
/// Each round computes `a = softmax((v q1)(v q2)^T)` and `v <- v + a v`.
/// `projections` holds one `(q1, q2)` pair per round, or a single pair
/// reused by every round.
pub fn reason(
    tape: &mut Tape,
    nodes: Var,
    projections: &[(Var, Var)],
    rounds: usize,
) -> Result<Reasoning> {
    if projections.is_empty() {
        return Err(Error::Invalid("no attention projections".into()));
    }
    let mut v = nodes;
    let mut attention = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let (q1, q2) = projections[round.min(projections.len() - 1)];
        let queries = tape.matmul(v, q1)?;
        let keys = tape.matmul(v, q2)?;
        let keys_t = tape.transpose(keys)?;
        let scores = tape.matmul(queries, keys_t)?;
        let a = tape.softmax_rows(scores)?;
        let attended = tape.matmul(a, v)?;
        v = tape.add(v, attended)?;
        attention.push(a);
    }
    Ok(Reasoning {
        refined: v,
        attention,
    })
}

/// Adds each category's projected node feature to the pixels it claims.
pub fn distribute(
    tape: &mut Tape,
    features: Var,
    refined: Var,
    out_proj: Var,
    masks: &LabelMap,
) -> Result<Var> {
    let per_class = tape.matmul(refined, out_proj)?;
    let spread = tape.gather_rows(per_class, masks)?;
    Ok(tape.add(features, spread)?)
}

fn level_masks(
    source: MaskSource,
    prediction: &Tensor,
    taxonomy: &Taxonomy,
    level: Level,
) -> Result<LabelMap> {
    match source {
        MaskSource::Predicted => masks_from_prediction(prediction, taxonomy, level),
        MaskSource::GroundTruth(gt) => Ok(taxonomy.coarsen(gt, level)?),
        MaskSource::Fixed(all) => {
            let m = &all[level.number() - 1];
            if m.classes() != taxonomy.num_classes(level) {
                return Err(Error::Invalid(format!(
                    "fixed {level} masks have {} classes, expected {}",
                    m.classes(),
                    taxonomy.num_classes(level)
                )));
            }
            Ok(m.clone())
        }
    }
}

/// Runs the whole pyramid on `features` given the main-branch `prediction`.
pub fn pyramid_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    features: Var,
    prediction: &Tensor,
    taxonomy: &Taxonomy,
    config: &GpmConfig,
    source: MaskSource,
) -> Result<PyramidOutput> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 || shape[2] != config.channels {
        return Err(Error::Invalid(format!(
            "pyramid expects H×W×{} features, got {shape:?}",
            config.channels
        )));
    }
    let mut current = features;
    let mut outputs = vec![features];
    let mut levels = Vec::with_capacity(config.levels.len());
    for &level in &config.levels {
        let masks = level_masks(source, prediction, taxonomy, level)?;
        masks.ensure_size(shape[0], shape[1])?;
        let nodes = aggregate(tape, current, &masks, level, config.pooling)?;

        let rounds = if config.fresh_weights { config.iterations } else { 1 };
        let mut projections = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let (q1, q2) = config.projection_names(level, round);
            projections.push((binder.param(tape, &q1)?, binder.param(tape, &q2)?));
        }
        let reasoning = reason(tape, nodes.features, &projections, config.iterations)?;
        let out_proj = binder.param(tape, &GpmConfig::out_proj_name(level))?;
        let output = distribute(tape, current, reasoning.refined, out_proj, &masks)?;
        outputs.push(output);
        current = output;
        levels.push(LevelTrace {
            nodes,
            reasoning,
            output,
        });
    }
    let fused = tape.concat(&outputs, 2)?;
    let (logits, prediction) = prediction_head(tape, binder, "gpm.head", fused)?;
    Ok(PyramidOutput {
        fused,
        prediction,
        logits,
        levels,
    })
}
