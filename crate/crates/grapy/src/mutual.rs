//! One model trained across datasets with different label granularities.
//!
//! Parameters live in a single store. The backbone and pyramid levels 1–2 are
//! stored once under `shared.`; each dataset `d` (1-based) owns
//! `branch{d}.main_head`, `branch{d}.gpm.level3` and `branch{d}.gpm.head`.
//! A branch's forward pass is the single-dataset forward with logical names
//! routed onto that layout, so a step on dataset `d` can only ever read, and
//! therefore only ever update, the shared parameters and its own branch.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::gpm::{MaskSource, NodeSet};
use crate::labels::LabelMap;
use crate::model::{
    batch_loss, epoch_batches, forward, format_manifest, numerical_context, parse_manifest, ForwardOutput, LogRecord,
    ModelConfig, ParserModel, Phase, Prediction, TrainConfig,
};
use crate::optim::Sgd;
use crate::params::{Binder, ParamStore};
use crate::tape::Tape;
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

/// Storage name of a logical parameter name for branch `d`.
pub fn storage_name(logical: &str, d: usize, share_backbone: bool) -> String {
    let shared = (share_backbone && logical.starts_with("backbone."))
        || logical.starts_with("gpm.level1.")
        || logical.starts_with("gpm.level2.");
    if shared {
        format!("shared.{logical}")
    } else {
        format!("branch{d}.{logical}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlModel {
    pub config: ModelConfig,
    pub share_backbone: bool,
    /// Taxonomy of branch `d` at index `d - 1`.
    pub taxonomies: Vec<Taxonomy>,
    pub params: ParamStore,
}

impl MlModel {
    pub fn new(config: ModelConfig, taxonomies: Vec<Taxonomy>, share_backbone: bool, seed: u64) -> Result<Self> {
        if taxonomies.len() < 2 {
            return Err(Error::Invalid("mutual learning needs at least two datasets".into()));
        }
        let mut params = ParamStore::new();
        for (i, tax) in taxonomies.iter().enumerate() {
            let d = i + 1;
            let local = config.init_params(tax.num_classes(Level::Three), branch_seed(seed, d))?;
            for (name, value) in local.iter() {
                let stored = storage_name(name, d, share_backbone);
                if !params.contains(&stored) {
                    params.insert(stored, value.clone())?;
                }
            }
        }
        Ok(Self {
            config,
            share_backbone,
            taxonomies,
            params,
        })
    }

    pub fn branches(&self) -> usize {
        self.taxonomies.len()
    }

    pub fn taxonomy(&self, d: usize) -> Result<&Taxonomy> {
        self.check_branch(d)?;
        Ok(&self.taxonomies[d - 1])
    }

    /// Branch index (1-based) bound to the taxonomy called `name`.
    pub fn branch_of(&self, name: &str) -> Option<usize> {
        self.taxonomies.iter().position(|t| t.name() == name).map(|i| i + 1)
    }

    fn check_branch(&self, d: usize) -> Result<()> {
        if d == 0 || d > self.taxonomies.len() {
            return Err(Error::Invalid(format!(
                "branch {d} does not exist; valid branches are 1..={}",
                self.taxonomies.len()
            )));
        }
        Ok(())
    }

    pub fn shared_names(&self) -> Vec<&str> {
        self.params.names().filter(|n| n.starts_with("shared.")).collect()
    }

    pub fn branch_names(&self, d: usize) -> Vec<&str> {
        let prefix = format!("branch{d}.");
        self.params.names().filter(|n| n.starts_with(&prefix)).collect()
    }

    /// A binder reading branch `d`'s view of the store.
    pub fn binder(&self, d: usize) -> Binder<'_> {
        let share = self.share_backbone;
        Binder::new(&self.params).with_route(move |n| storage_name(n, d, share))
    }

    /// Records branch `d`'s forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        d: usize,
        image: &Tensor,
        masks: MaskSource,
    ) -> Result<ForwardOutput> {
        forward(tape, binder, &self.config, self.taxonomy(d)?, image, true, masks)
    }

    pub fn predict(&self, d: usize, image: &Tensor) -> Result<Prediction> {
        self.predict_with(d, image, MaskSource::Predicted)
    }

    pub fn predict_with(&self, d: usize, image: &Tensor, masks: MaskSource) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut binder = self.binder(d).with_trainable(|_| false);
        let out = self.forward_on(&mut tape, &mut binder, d, image, masks)?;
        Ok(Prediction {
            main: tape.value(out.main).clone(),
            gpm: out.gpm().map(|v| tape.value(v).clone()),
        })
    }

    /// Pyramid node sets of branch `d` (levels in config order).
    pub fn node_features(&self, d: usize, image: &Tensor, masks: MaskSource) -> Result<Vec<(Level, Tensor)>> {
        let mut tape = Tape::new();
        let mut binder = self.binder(d).with_trainable(|_| false);
        let out = self.forward_on(&mut tape, &mut binder, d, image, masks)?;
        let levels = out.pyramid.map(|p| p.levels).unwrap_or_default();
        Ok(levels
            .iter()
            .map(|t| {
                let NodeSet { level, features, .. } = &t.nodes;
                (*level, tape.value(*features).clone())
            })
            .collect())
    }

    /// Branch `d` as a standalone single-dataset model.
    pub fn branch_model(&self, d: usize) -> Result<ParserModel> {
        let tax = self.taxonomy(d)?.clone();
        let layout = self.config.init_params(tax.num_classes(Level::Three), 0)?;
        let mut params = ParamStore::new();
        for (name, _) in layout.iter() {
            let stored = storage_name(name, d, self.share_backbone);
            params.insert(name, self.params.get(&stored)?.clone())?;
        }
        Ok(ParserModel {
            config: self.config.clone(),
            taxonomy: tax,
            params,
        })
    }

    /// One update on a batch from dataset `d`. Gradients reach only the
    /// shared parameters and branch `d`. Returns the pre-update loss.
    pub fn ml_step(
        &mut self,
        optimizer: &mut Sgd,
        d: usize,
        batch: &[&Sample],
        lr: f64,
        phase: Phase,
        gt_masks: bool,
    ) -> Result<f64> {
        let (loss, _, grads) = self.losses_and_grads(&[(d, batch)], phase, gt_masks, |_| true)?;
        optimizer.step(&mut self.params, &grads, lr)?;
        Ok(loss)
    }

    /// One update on one batch per listed dataset, all losses summed on a
    /// single tape before the update. Returns the total and per-dataset
    /// losses.
    pub fn accumulate_step(
        &mut self,
        optimizer: &mut Sgd,
        batches: &[(usize, &[&Sample])],
        lr: f64,
        phase: Phase,
        gt_masks: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let (total, parts, grads) = self.losses_and_grads(batches, phase, gt_masks, |_| true)?;
        optimizer.step(&mut self.params, &grads, lr)?;
        Ok((total, parts))
    }

    /// Like [`MlModel::ml_step`] but only parameters accepted by `trainable`
    /// (storage names) are updated.
    pub fn restricted_step(
        &mut self,
        optimizer: &mut Sgd,
        d: usize,
        batch: &[&Sample],
        lr: f64,
        trainable: impl Fn(&str) -> bool + Copy,
    ) -> Result<f64> {
        let (loss, _, grads) = self.losses_and_grads(&[(d, batch)], Phase::Full, false, trainable)?;
        optimizer.step(&mut self.params, &grads, lr)?;
        Ok(loss)
    }

    #[allow(clippy::type_complexity)]
    fn losses_and_grads(
        &self,
        batches: &[(usize, &[&Sample])],
        phase: Phase,
        gt_masks: bool,
        extra: impl Fn(&str) -> bool + Copy,
    ) -> Result<(f64, Vec<f64>, BTreeMap<String, Tensor>)> {
        if batches.is_empty() {
            return Err(Error::Dataset("no batches".into()));
        }
        let mut tape = Tape::new();
        let mut binders = Vec::with_capacity(batches.len());
        let mut losses = Vec::with_capacity(batches.len());
        for &(d, batch) in batches {
            let tax = self.taxonomy(d)?;
            let mut binder = self.binder(d).with_trainable(move |name| {
                let in_phase = match phase {
                    Phase::Pretrain => name.contains("backbone.") || name.contains("main_head."),
                    Phase::Full => true,
                };
                in_phase && extra(name)
            });
            let l = batch_loss(&mut tape, &mut binder, &self.config, tax, batch, phase, gt_masks)?;
            losses.push(l);
            binders.push(binder);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let parts: Vec<f64> = losses.iter().map(|&l| tape.value(l).item()).collect();
        let value = tape.value(total).item();
        tape.backward(total)?;
        // a shared parameter bound by several binders is one leaf per binder;
        // its gradients add up
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for binder in &binders {
            for (name, g) in binder.grads(&tape) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        Ok((value, parts, grads))
    }

    pub fn manifest(&self) -> String {
        let mut fields = self.config.manifest_fields();
        fields.insert("kind".into(), "mutual".into());
        let names: Vec<&str> = self.taxonomies.iter().map(Taxonomy::name).collect();
        fields.insert("taxonomies".into(), names.join(","));
        fields.insert("share_backbone".into(), u8::from(self.share_backbone).to_string());
        format_manifest(&fields)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.manifest(), self.params.clone())
    }

    /// Taxonomy names listed in a mutual checkpoint manifest.
    pub fn manifest_taxonomies(ck: &Checkpoint) -> Result<Vec<String>> {
        let fields = parse_manifest(&ck.manifest);
        if fields.get("kind").map(String::as_str) != Some("mutual") {
            return Err(Error::Mismatch("not a mutual-learning checkpoint".into()));
        }
        let list = fields
            .get("taxonomies")
            .ok_or_else(|| Error::Mismatch("checkpoint manifest lacks `taxonomies`".into()))?;
        Ok(list.split(',').map(str::to_string).collect())
    }

    pub fn from_checkpoint(ck: &Checkpoint, taxonomies: Vec<Taxonomy>) -> Result<Self> {
        let names = Self::manifest_taxonomies(ck)?;
        let given: Vec<&str> = taxonomies.iter().map(Taxonomy::name).collect();
        if names != given {
            return Err(Error::Mismatch(format!(
                "checkpoint branches are bound to {names:?}, got {given:?}"
            )));
        }
        let fields = parse_manifest(&ck.manifest);
        let config = ModelConfig::from_manifest_fields(&fields)?;
        let share_backbone = fields.get("share_backbone").map(String::as_str) != Some("0");
        let layout = Self::new(config.clone(), taxonomies.clone(), share_backbone, 0)?;
        for (name, t) in layout.params.iter() {
            let got = ck
                .params
                .get(name)
                .map_err(|_| Error::Mismatch(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "`{name}` has shape {:?}, architecture needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if ck.params.len() != layout.params.len() {
            return Err(Error::Mismatch("checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            config,
            share_backbone,
            taxonomies,
            params: ck.params.clone(),
        })
    }
}

fn branch_seed(seed: u64, d: usize) -> u64 {
    seed.wrapping_add((d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Dataset index (1-based) visited at global step `step`: 1, 2, ..., n, 1, ...
pub fn round_robin(step: usize, datasets: usize) -> usize {
    step % datasets + 1
}

/// Endless reshuffled mini-batches over one dataset.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    pending: Vec<Vec<usize>>,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            len,
            batch_size,
            seed,
            epoch: 0,
            pending: Vec::new(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            self.pending = epoch_batches(self.len, self.batch_size, self.seed, self.epoch);
            self.pending.reverse();
            self.epoch += 1;
        }
        self.pending.pop().expect("non-empty dataset")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlTrainConfig {
    /// Learning rate, momentum, batch size, phase lengths, seed.
    pub base: TrainConfig,
    /// Round-robin steps per epoch; each step sees one batch from one
    /// dataset. Defaults to enough for every dataset to be covered once.
    pub steps_per_epoch: Option<usize>,
    /// Sum one batch per dataset before each update instead of alternating.
    pub accumulate: bool,
    /// Fine-tune shared parameters and this branch (1-based) on its own data
    /// after joint training.
    pub finetune: Option<usize>,
    pub finetune_epochs: usize,
}

impl Default for MlTrainConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            steps_per_epoch: None,
            accumulate: false,
            finetune: None,
            finetune_epochs: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlOutcome {
    pub joint: MlModel,
    pub finetuned: Option<MlModel>,
}

/// Joint pretraining of backbone and main heads, then joint two-branch
/// training with round-robin sampling, then the optional fine-tune.
pub fn train_mutual(
    mut model: MlModel,
    datasets: &[Dataset],
    config: &MlTrainConfig,
    mut log: impl FnMut(&LogRecord),
) -> Result<MlOutcome> {
    let n = model.branches();
    if datasets.len() != n {
        return Err(Error::Invalid(format!("{n} branches but {} datasets", datasets.len())));
    }
    for (i, ds) in datasets.iter().enumerate() {
        if ds.is_empty() {
            return Err(Error::Dataset(format!("dataset {} is empty", i + 1)));
        }
        if ds.taxonomy.name() != model.taxonomies[i].name() {
            return Err(Error::Mismatch(format!(
                "dataset {} uses taxonomy `{}`, branch expects `{}`",
                i + 1,
                ds.taxonomy.name(),
                model.taxonomies[i].name()
            )));
        }
    }
    let base = &config.base;
    let bs = base.batch_size.max(1);
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| n * datasets.iter().map(|d| d.len().div_ceil(bs)).max().unwrap_or(1));
    let mut streams: Vec<BatchStream> = (0..n)
        .map(|i| BatchStream::new(datasets[i].len(), bs, base.seed.wrapping_add(i as u64)))
        .collect();
    let schedule = base.schedule();
    let mut optimizer = base.optimizer();
    let mut step = 0;
    let joint_epochs = base.pretrain_epochs + base.main_epochs;
    for epoch in 0..joint_epochs {
        let phase = if epoch < base.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Full
        };
        if epoch == base.pretrain_epochs {
            optimizer = base.optimizer();
        }
        let lr = schedule.at(epoch);
        if config.accumulate {
            for _ in 0..steps_per_epoch.div_ceil(n) {
                let idx: Vec<Vec<usize>> = streams.iter_mut().map(BatchStream::next_batch).collect();
                let refs: Vec<Vec<&Sample>> = idx
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.iter().map(|&j| &datasets[i].samples[j]).collect())
                    .collect();
                let batches: Vec<(usize, &[&Sample])> =
                    refs.iter().enumerate().map(|(i, r)| (i + 1, r.as_slice())).collect();
                let (loss, _) = model
                    .accumulate_step(&mut optimizer, &batches, lr, phase, base.gt_masks)
                    .map_err(|e| numerical_context(e, epoch, step))?;
                check_finite(loss, epoch, step)?;
                log(&LogRecord {
                    epoch,
                    step,
                    loss,
                    lr,
                    dataset: Some("all".into()),
                });
                step += 1;
            }
        } else {
            for _ in 0..steps_per_epoch {
                let d = round_robin(step, n);
                let idx = streams[d - 1].next_batch();
                let refs: Vec<&Sample> = idx.iter().map(|&j| &datasets[d - 1].samples[j]).collect();
                let loss = model
                    .ml_step(&mut optimizer, d, &refs, lr, phase, base.gt_masks)
                    .map_err(|e| numerical_context(e, epoch, step))?;
                check_finite(loss, epoch, step)?;
                log(&LogRecord {
                    epoch,
                    step,
                    loss,
                    lr,
                    dataset: Some(model.taxonomies[d - 1].name().to_string()),
                });
                step += 1;
            }
        }
    }

    let finetuned = match config.finetune {
        None => None,
        Some(d) => {
            model.check_branch(d)?;
            let mut tuned = model.clone();
            let mut optimizer = base.optimizer();
            let lr = schedule.at(joint_epochs);
            let ds = &datasets[d - 1];
            for e in 0..config.finetune_epochs {
                let epoch = joint_epochs + e;
                for batch in epoch_batches(ds.len(), bs, base.seed ^ 0xF1, epoch) {
                    let refs: Vec<&Sample> = batch.iter().map(|&j| &ds.samples[j]).collect();
                    let loss = tuned
                        .ml_step(&mut optimizer, d, &refs, lr, Phase::Full, base.gt_masks)
                        .map_err(|e| numerical_context(e, epoch, step))?;
                    check_finite(loss, epoch, step)?;
                    log(&LogRecord {
                        epoch,
                        step,
                        loss,
                        lr,
                        dataset: Some(ds.taxonomy.name().to_string()),
                    });
                    step += 1;
                }
            }
            Some(tuned)
        }
    };
    Ok(MlOutcome {
        joint: model,
        finetuned,
    })
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("loss = {loss}"),
        })
    }
}

/// Outcome of one sharing-audit check.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Verifies parameter sharing and gradient locality on a copy of `model`.
///
/// 1. A step on dataset 1 changes some shared parameter and no parameter of
///    any other branch.
/// 2. Negative control: a step on the last dataset that may only update that
///    branch's own parameters leaves every shared parameter byte-identical.
/// 3. With identical masks forced on every branch, level 1–2 node features
///    agree exactly across branches (shared backbone only).
pub fn audit_sharing(model: &MlModel, datasets: &[Dataset], lr: f64) -> Result<Vec<AuditCheck>> {
    let n = model.branches();
    if datasets.len() != n || datasets.iter().any(Dataset::is_empty) {
        return Err(Error::Dataset("audit needs one non-empty dataset per branch".into()));
    }
    let mut checks = Vec::new();
    let mut m = model.clone();

    let before = m.params.clone();
    let batch: Vec<&Sample> = datasets[0].samples.iter().take(2).collect();
    m.ml_step(&mut Sgd::new(0.0), 1, &batch, lr, Phase::Full, false)?;
    let changed_shared = m
        .shared_names()
        .iter()
        .filter(|name| m.params.get(name).ok() != before.get(name).ok())
        .count();
    let touched_other: Vec<String> = (2..=n)
        .flat_map(|d| m.branch_names(d))
        .filter(|name| m.params.get(name).ok() != before.get(name).ok())
        .map(str::to_string)
        .collect();
    checks.push(AuditCheck {
        name: "step on dataset 1 updates shared parameters",
        passed: changed_shared > 0,
        detail: format!("{changed_shared} of {} shared tensors changed", m.shared_names().len()),
    });
    checks.push(AuditCheck {
        name: "step on dataset 1 leaves other branches unchanged",
        passed: touched_other.is_empty(),
        detail: if touched_other.is_empty() {
            "no foreign branch tensor changed".into()
        } else {
            format!("changed: {}", touched_other.join(", "))
        },
    });

    let before = m.params.clone();
    let own = format!("branch{n}.");
    let batch: Vec<&Sample> = datasets[n - 1].samples.iter().take(2).collect();
    m.restricted_step(&mut Sgd::new(0.0), n, &batch, lr, |name| name.starts_with(own.as_str()))?;
    let shared_changed = m
        .shared_names()
        .iter()
        .filter(|name| m.params.get(name).ok() != before.get(name).ok())
        .count();
    let own_changed = m
        .branch_names(n)
        .iter()
        .filter(|name| m.params.get(name).ok() != before.get(name).ok())
        .count();
    checks.push(AuditCheck {
        name: "branch-only step leaves shared parameters byte-identical",
        passed: shared_changed == 0 && own_changed > 0,
        detail: format!("{shared_changed} shared and {own_changed} own tensors changed"),
    });

    if model.share_backbone {
        let sample = &datasets[0].samples[0];
        let gt1 = model.taxonomies[0].coarsen(&sample.labels, Level::One)?;
        let gt2 = model.taxonomies[0].coarsen(&sample.labels, Level::Two)?;
        let mut reference: Option<Vec<(Level, Tensor)>> = None;
        let mut identical = true;
        for d in 1..=n {
            let (h, w) = sample.labels.size();
            let k3 = model.taxonomies[d - 1].num_classes(Level::Three);
            let masks = [gt1.clone(), gt2.clone(), LabelMap::filled(h, w, k3, 0)];
            let nodes: Vec<(Level, Tensor)> = model
                .node_features(d, &sample.image, MaskSource::Fixed(&masks))?
                .into_iter()
                .filter(|(l, _)| *l != Level::Three)
                .collect();
            match &reference {
                None => reference = Some(nodes),
                Some(r) => identical &= *r == nodes,
            }
        }
        checks.push(AuditCheck {
            name: "forced masks give identical level 1-2 nodes on every branch",
            passed: identical,
            detail: format!("compared {n} branches"),
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpm::GpmConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: vec![4],
            gpm: GpmConfig {
                channels: 4,
                ..GpmConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn taxonomies() -> Vec<Taxonomy> {
        ["A", "B", "C"].map(|n| Taxonomy::builtin(n).unwrap()).to_vec()
    }

    #[test]
    fn names_partition_into_shared_and_branches() {
        let m = MlModel::new(tiny(), taxonomies(), true, 1).unwrap();
        let shared = m.shared_names().len();
        let branches: usize = (1..=3).map(|d| m.branch_names(d).len()).sum();
        assert_eq!(shared + branches, m.params.len());
        assert!(m.params.contains("shared.backbone.conv0.kernel"));
        assert!(m.params.contains("shared.gpm.level2.q1"));
        assert!(m.params.contains("branch3.gpm.level3.out_proj"));
        assert!(m.params.contains("branch2.main_head.kernel"));
        assert_eq!(m.params.get("branch2.gpm.head.kernel").unwrap().shape()[3], 12);

        let unshared = MlModel::new(tiny(), taxonomies(), false, 1).unwrap();
        assert!(unshared.params.contains("branch1.backbone.conv0.kernel"));
        assert!(!unshared.params.contains("shared.backbone.conv0.kernel"));
    }

    #[test]
    fn round_robin_cycles() {
        let order: Vec<usize> = (0..7).map(|s| round_robin(s, 3)).collect();
        assert_eq!(order, [1, 2, 3, 1, 2, 3, 1]);
    }

    #[test]
    fn stream_reshuffles_each_pass() {
        let mut s = BatchStream::new(5, 2, 3);
        let first: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, [0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch().len(), 2);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let m = MlModel::new(tiny(), taxonomies(), true, 5).unwrap();
        let ck = Checkpoint::decode(&m.to_checkpoint().encode()).unwrap();
        assert_eq!(MlModel::from_checkpoint(&ck, taxonomies()).unwrap(), m);
        let mut swapped = taxonomies();
        swapped.swap(0, 1);
        assert!(matches!(MlModel::from_checkpoint(&ck, swapped), Err(Error::Mismatch(_))));
    }

    #[test]
    fn branch_zero_is_invalid() {
        let m = MlModel::new(tiny(), taxonomies(), true, 5).unwrap();
        assert!(m.predict(0, &Tensor::zeros(&[16, 16, 3])).is_err());
        assert!(m.predict(4, &Tensor::zeros(&[16, 16, 3])).is_err());
    }

    #[test]
    fn needs_two_datasets() {
        assert!(MlModel::new(tiny(), taxonomies()[..1].to_vec(), true, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = MlModel::new(tiny(), taxonomies(), true, 9).unwrap();
        let b = MlModel::new(tiny(), taxonomies(), true, 9).unwrap();
        assert_eq!(a, b);
    }
}
