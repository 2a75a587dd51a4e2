//! Single-dataset parser: a small convolutional backbone, a main prediction
//! head, and the graph pyramid branch on top of the backbone features.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gpm::{pyramid_forward, GpmConfig, MaskSource, Pooling, PyramidOutput};
use crate::labels::LabelMap;
use crate::layers::{conv, init_conv, init_conv_he, prediction_head};
use crate::optim::{LrSchedule, Sgd};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Widths of the hidden backbone layers; the last layer outputs
    /// `gpm.channels`.
    pub hidden: Vec<usize>,
    pub kernel: usize,
    /// Run the pyramid branch. Off gives the plain backbone baseline.
    pub use_gpm: bool,
    pub gpm: GpmConfig,
    /// Weight of the pyramid branch loss.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: vec![16, 16],
            kernel: 3,
            use_gpm: true,
            gpm: GpmConfig::default(),
            lambda: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.gpm.channels
    }

    pub fn backbone_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Registers backbone and main head parameters.
    pub fn init_trunk(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) -> Result<()> {
        let mut widths = vec![self.in_channels];
        widths.extend(&self.hidden);
        widths.push(self.channels());
        for (i, pair) in widths.windows(2).enumerate() {
            let name = format!("{prefix}backbone.conv{i}");
            init_conv_he(store, rng, &name, self.kernel, pair[0], pair[1])?;
        }
        Ok(())
    }

    pub fn init_params(&self, classes: usize, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_trunk(&mut store, &mut rng, "")?;
        init_conv(&mut store, &mut rng, "main_head", 1, self.channels(), classes)?;
        if self.use_gpm {
            self.gpm.init_params(&mut store, &mut rng, classes)?;
        }
        Ok(store)
    }

    /// `key=value` fields describing this architecture.
    pub fn manifest_fields(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let levels: Vec<usize> = self.gpm.levels.iter().map(|l| l.number()).collect();
        BTreeMap::from([
            ("in_channels".into(), self.in_channels.to_string()),
            ("hidden".into(), join(&self.hidden)),
            ("kernel".into(), self.kernel.to_string()),
            ("channels".into(), self.channels().to_string()),
            ("gpm".into(), u8::from(self.use_gpm).to_string()),
            ("levels".into(), join(&levels)),
            ("pooling".into(), self.gpm.pooling.as_str().into()),
            ("iterations".into(), self.gpm.iterations.to_string()),
            ("fresh".into(), u8::from(self.gpm.fresh_weights).to_string()),
            ("lambda".into(), format!("{}", self.lambda)),
        ])
    }

    pub fn from_manifest_fields(fields: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Mismatch(format!("checkpoint manifest lacks `{k}`")))
        };
        let bad = |k: &str| Error::Mismatch(format!("checkpoint manifest has a bad `{k}`"));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| s.parse().map_err(|_| bad(k))).collect()
        };
        let levels = list("levels")?
            .into_iter()
            .map(|n| Level::from_number(n).ok_or_else(|| bad("levels")))
            .collect::<Result<_>>()?;
        Ok(Self {
            in_channels: num("in_channels")?,
            hidden: list("hidden")?,
            kernel: num("kernel")?,
            use_gpm: num("gpm")? == 1,
            gpm: GpmConfig {
                channels: num("channels")?,
                iterations: num("iterations")?,
                fresh_weights: num("fresh")? == 1,
                pooling: Pooling::parse(get("pooling")?).ok_or_else(|| bad("pooling"))?,
                levels,
            },
            lambda: get("lambda")?.parse().map_err(|_| bad("lambda"))?,
        })
    }
}

pub fn format_manifest(fields: &BTreeMap<String, String>) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn parse_manifest(line: &str) -> BTreeMap<String, String> {
    line.split('\t')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Backbone features `f`.
    pub features: Var,
    /// Main-branch probabilities `y`.
    pub main: Var,
    pub main_logits: Var,
    pub pyramid: Option<PyramidOutput>,
}

impl ForwardOutput {
    /// Pyramid-branch probabilities `ŷ`, when the branch ran.
    pub fn gpm(&self) -> Option<Var> {
        self.pyramid.as_ref().map(|p| p.prediction)
    }

    pub fn gpm_logits(&self) -> Option<Var> {
        self.pyramid.as_ref().map(|p| p.logits)
    }
}

pub fn backbone(tape: &mut Tape, binder: &mut Binder, config: &ModelConfig, image: Var) -> Result<Var> {
    let mut x = image;
    let layers = config.backbone_layers();
    for i in 0..layers {
        x = conv(tape, binder, &format!("backbone.conv{i}"), x)?;
        if i + 1 < layers {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Forward pass. With `with_pyramid` false (or the pyramid disabled in the
/// config) only the main branch runs.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder,
    config: &ModelConfig,
    taxonomy: &Taxonomy,
    image: &Tensor,
    with_pyramid: bool,
    masks: MaskSource,
) -> Result<ForwardOutput> {
    if image.rank() != 3 || image.shape()[2] != config.in_channels {
        return Err(Error::Invalid(format!(
            "expected an H×W×{} image, got {:?}",
            config.in_channels,
            image.shape()
        )));
    }
    let input = tape.constant(image.clone());
    let features = backbone(tape, binder, config, input)?;
    let (main_logits, main) = prediction_head(tape, binder, "main_head", features)?;
    let pyramid = if with_pyramid && config.use_gpm {
        let y = tape.value(main).clone();
        Some(pyramid_forward(tape, binder, features, &y, taxonomy, &config.gpm, masks)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        features,
        main,
        main_logits,
        pyramid,
    })
}

/// Loss components as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub gpm: Option<Var>,
}

/// Mean per-pixel negative log-likelihood of `labels` under
/// `softmax(logits)`. Working from logits keeps the log finite however
/// confident the prediction.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let k = tape.shape(logits).get(2).copied().unwrap_or(0);
    if labels.classes() != k {
        return Err(Error::Invalid(format!(
            "labels have {} classes, prediction has {k}",
            labels.classes()
        )));
    }
    let log_probs = tape.log_softmax_last(logits)?;
    let picked = tape.pick(log_probs, labels)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.neg(mean)?)
}

/// `L = L_main + λ · L_gpm`, each a per-pixel mean cross-entropy, from the
/// two branches' logits.
pub fn loss(tape: &mut Tape, main: Var, gpm: Option<Var>, labels: &LabelMap, lambda: f64) -> Result<LossTerms> {
    let main_loss = cross_entropy(tape, main, labels)?;
    let (total, gpm_loss) = match gpm {
        Some(g) => {
            let gl = cross_entropy(tape, g, labels)?;
            let weighted = tape.scale(gl, lambda)?;
            (tape.add(main_loss, weighted)?, Some(gl))
        }
        None => (main_loss, None),
    };
    Ok(LossTerms {
        total,
        main: main_loss,
        gpm: gpm_loss,
    })
}

/// Which parameters a training phase updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Backbone and main head only, main-branch loss only.
    Pretrain,
    /// Everything, full two-branch loss.
    Full,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub main: Tensor,
    pub gpm: Option<Tensor>,
}

impl Prediction {
    /// The pyramid prediction when present, else the main one.
    pub fn best(&self) -> &Tensor {
        self.gpm.as_ref().unwrap_or(&self.main)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParserModel {
    pub config: ModelConfig,
    pub taxonomy: Taxonomy,
    pub params: ParamStore,
}

impl ParserModel {
    pub fn new(config: ModelConfig, taxonomy: Taxonomy, seed: u64) -> Result<Self> {
        let params = config.init_params(taxonomy.num_classes(Level::Three), seed)?;
        Ok(Self {
            config,
            taxonomy,
            params,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        self.predict_with(image, MaskSource::Predicted)
    }

    pub fn predict_with(&self, image: &Tensor, masks: MaskSource) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params).with_trainable(|_| false);
        let out = forward(&mut tape, &mut binder, &self.config, &self.taxonomy, image, true, masks)?;
        Ok(Prediction {
            main: tape.value(out.main).clone(),
            gpm: out.gpm().map(|v| tape.value(v).clone()),
        })
    }

    /// One forward/backward/update on `batch`. Returns the pre-update loss
    /// averaged over the batch.
    pub fn train_step(
        &mut self,
        optimizer: &mut Sgd,
        batch: &[&Sample],
        lr: f64,
        phase: Phase,
        gt_masks: bool,
    ) -> Result<f64> {
        let (value, grads) = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params).with_trainable(move |name| match phase {
                Phase::Pretrain => name.starts_with("backbone.") || name.starts_with("main_head."),
                Phase::Full => true,
            });
            let total = batch_loss(&mut tape, &mut binder, &self.config, &self.taxonomy, batch, phase, gt_masks)?;
            let value = tape.value(total).item();
            tape.backward(total)?;
            (value, binder.grads(&tape))
        };
        optimizer.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }

    pub fn manifest(&self) -> String {
        let mut fields = self.config.manifest_fields();
        fields.insert("kind".into(), "single".into());
        fields.insert("taxonomy".into(), self.taxonomy.name().to_string());
        format_manifest(&fields)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.manifest(), self.params.clone())
    }

    /// Rebuilds a model from a checkpoint. `taxonomy` must be the one named in
    /// the manifest.
    pub fn from_checkpoint(ck: &Checkpoint, taxonomy: Taxonomy) -> Result<Self> {
        let fields = parse_manifest(&ck.manifest);
        if fields.get("kind").map(String::as_str) != Some("single") {
            return Err(Error::Mismatch("not a single-dataset checkpoint".into()));
        }
        match fields.get("taxonomy") {
            Some(name) if name == taxonomy.name() => {}
            other => {
                return Err(Error::Mismatch(format!(
                    "checkpoint was trained on taxonomy {:?}, data uses `{}`",
                    other,
                    taxonomy.name()
                )))
            }
        }
        let config = ModelConfig::from_manifest_fields(&fields)?;
        let expected = config.init_params(taxonomy.num_classes(Level::Three), 0)?;
        for (name, t) in expected.iter() {
            let got = ck.params.get(name).map_err(|_| Error::Mismatch(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "`{name}` has shape {:?}, architecture needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            taxonomy,
            params: ck.params.clone(),
        })
    }
}

/// Builds the mean loss over `batch` on `tape`.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    config: &ModelConfig,
    taxonomy: &Taxonomy,
    batch: &[&Sample],
    phase: Phase,
    gt_masks: bool,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let size = batch[0].image.shape()[..2].to_vec();
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        if sample.image.shape()[..2] != size[..] {
            return Err(Error::Dataset("batch images differ in size".into()));
        }
        let masks = if gt_masks {
            MaskSource::GroundTruth(&sample.labels)
        } else {
            MaskSource::Predicted
        };
        let out = forward(tape, binder, config, taxonomy, &sample.image, phase == Phase::Full, masks)?;
        let terms = loss(tape, out.main_logits, out.gpm_logits(), &sample.labels, config.lambda)?;
        losses.push(terms.total);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64)?)
}

/// Converts a non-finite tensor error into a loss failure with context.
pub(crate) fn numerical_context(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// One line of the append-only training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dataset: Option<String>,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!("{}\t{}\t{}\t{}", self.epoch, self.step, self.loss, self.lr);
        if let Some(d) = &self.dataset {
            line.push('\t');
            line.push_str(d);
        }
        line
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&f.len()) {
            return None;
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            loss: f[2].parse().ok()?,
            lr: f[3].parse().ok()?,
            dataset: f.get(4).map(|s| s.to_string()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub main_epochs: usize,
    /// Epoch (counted over both phases) at which the learning rate decays;
    /// `None` means the first full-model epoch. A factor of 1 disables it.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    /// Joint gradient-norm ceiling per step; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub gt_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 0.2,
            momentum: 0.9,
            batch_size: 8,
            pretrain_epochs: 8,
            main_epochs: 24,
            decay_epoch: None,
            decay_factor: 0.25,
            clip_norm: Some(1.0),
            gt_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> Sgd {
        Sgd::new(self.momentum).with_clip_norm(self.clip_norm)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            decay_epoch: self.decay_epoch.unwrap_or(self.pretrain_epochs),
            decay_factor: self.decay_factor,
        }
    }
}

/// Deterministic shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains backbone and main head first (so the pyramid sees meaningful
/// masks), then the whole model on the two-branch loss.
pub fn pretrain_then_train(
    model: &mut ParserModel,
    samples: &[Sample],
    config: &TrainConfig,
    mut log: impl FnMut(&LogRecord),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let schedule = config.schedule();
    let mut optimizer = config.optimizer();
    let mut step = 0;
    let total_epochs = config.pretrain_epochs + config.main_epochs;
    for epoch in 0..total_epochs {
        let phase = if epoch < config.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Full
        };
        if epoch == config.pretrain_epochs {
            // momentum from the main-only objective does not carry over
            optimizer = config.optimizer();
        }
        let lr = schedule.at(epoch);
        for batch in epoch_batches(samples.len(), config.batch_size, config.seed, epoch) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let loss = model
                .train_step(&mut optimizer, &refs, lr, phase, config.gt_masks)
                .map_err(|e| numerical_context(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("loss = {loss}"),
                });
            }
            log(&LogRecord {
                epoch,
                step,
                loss,
                lr,
                dataset: None,
            });
            step += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden: vec![4],
            gpm: GpmConfig {
                channels: 4,
                ..GpmConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut c = tiny_config();
        c.gpm.levels = vec![Level::Three];
        c.gpm.pooling = Pooling::Max;
        c.lambda = 0.5;
        let back = ModelConfig::from_manifest_fields(&parse_manifest(&format_manifest(&c.manifest_fields()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parameter_names_follow_convention() {
        let store = tiny_config().init_params(7, 1).unwrap();
        let names: Vec<&str> = store.names().collect();
        for expected in [
            "backbone.conv0.kernel",
            "backbone.conv1.bias",
            "main_head.kernel",
            "gpm.level1.q1",
            "gpm.level2.q2",
            "gpm.level3.out_proj",
            "gpm.head.kernel",
        ] {
            assert!(names.contains(&expected), "missing {expected}: {names:?}");
        }
    }

    #[test]
    fn confident_logits_stay_finite() {
        let labels = LabelMap::new(2, 2, 3, vec![0, 2, 1, 1]).unwrap();
        let mut tape = Tape::new();
        let right = tape.constant(labels.one_hot().map(|x| 1000.0 * x));
        let wrong = tape.constant(labels.one_hot().map(|x| -1000.0 * x));
        let terms = loss(&mut tape, right, Some(wrong), &labels, 1.0).unwrap();
        assert_eq!(tape.value(terms.main).item(), 0.0);
        assert!((tape.value(terms.gpm.unwrap()).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn uniform_predictions_cost_two_log_k() {
        let k = 7;
        let labels = LabelMap::new(2, 3, k, vec![0, 1, 2, 3, 4, 6]).unwrap();
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::full(&[2, 3, k], 0.3));
        let terms = loss(&mut tape, y, Some(y), &labels, 1.0).unwrap();
        let expected = 2.0 * (k as f64).ln();
        assert!((tape.value(terms.total).item() - expected).abs() < 1e-12);
        let main_only = loss(&mut tape, y, Some(y), &labels, 0.0).unwrap();
        assert_eq!(tape.value(main_only.total).item(), tape.value(main_only.main).item());
    }

    #[test]
    fn label_out_of_range_for_prediction() {
        let labels = LabelMap::new(1, 2, 5, vec![0, 4]).unwrap();
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::full(&[1, 2, 3], 1.0 / 3.0));
        assert!(cross_entropy(&mut tape, y, &labels).is_err());
    }

    #[test]
    fn log_lines_parse_back() {
        let r = LogRecord {
            epoch: 3,
            step: 17,
            loss: 1.25,
            lr: 0.01,
            dataset: Some("B".into()),
        };
        assert_eq!(LogRecord::parse(&r.to_line()), Some(r));
        assert!(LogRecord::parse("1\t2").is_none());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 4, 7, 2);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 7, 2));
    }
}
