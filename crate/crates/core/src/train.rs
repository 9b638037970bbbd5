//! Two-phase training loop: a pretraining phase with binary cross entropy on
//! the seed map and Dice on the instance masks, then the main phase with L1
//! seed regression and the Lovász hinge. Seeds come from the predicted seed
//! map with the same sampler used at inference, and each one trains against
//! the ground-truth instance that contains it.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::labelmap::{boundary_distance, LabelMap};
use crate::losses::{mean_of_terms, seed_loss};
use crate::metrics::evaluate_dataset;
use crate::model::{self, coordinate_grid, ModelParams, PAD_MULTIPLE};
use crate::optim::Adam;
use crate::pipeline::{infer, sample_seeds, seed_window, PipelineConfig};
use crate::synth::augment_sample;
use crate::tensor::Tensor;

/// Per-instance candidate cap per image; extra seeds are subsampled away.
pub const CANDIDATE_CAP: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Augmentation crop side; clamped to the image and floored to the
    /// backbone stride.
    pub crop: usize,
    pub seed: u64,
    /// Batches per epoch; unset means one pass over the training set.
    pub batches_per_epoch: Option<usize>,
    /// Seed sampling and merging used during training and validation.
    pub pipeline: PipelineConfig,
    /// Metrics stream, one JSON object per line.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            pretrain_epochs: 10,
            lr: 1e-3,
            batch_size: 3,
            crop: 256,
            seed: 0,
            batches_per_epoch: None,
            pipeline: PipelineConfig::default(),
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::invalid("train config", "lr must be positive"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::invalid("train config", "batches_per_epoch must be positive"));
        }
        if self.crop < PAD_MULTIPLE {
            return Err(Error::invalid(
                "train config",
                format!("crop must be at least {PAD_MULTIPLE}"),
            ));
        }
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub seed_loss: f64,
    pub instance_loss: f64,
    pub total_loss: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_total_loss: f64,
    pub val_f1_05: Option<f64>,
    pub val_f1_mu: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation score, or the final state when
    /// no validation pairs were supplied.
    pub params: ModelParams,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_f1_mu: f64,
}

struct Logger {
    out: Option<BufWriter<File>>,
}

impl Logger {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let out = match path {
            Some(p) => Some(BufWriter::new(
                File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?,
            )),
            None => None,
        };
        Ok(Self { out })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = &mut self.out {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::invalid("metrics log", e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush().map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

fn effective_crop(requested: usize, sets: [&[(Tensor, LabelMap)]; 2]) -> Result<usize> {
    let mut crop = requested;
    for set in sets {
        for (img, _) in set {
            let s = img.shape();
            crop = crop.min(s[1]).min(s[2]);
        }
    }
    crop -= crop % PAD_MULTIPLE;
    if crop < PAD_MULTIPLE {
        return Err(Error::invalid(
            "train",
            format!("images too small for a {PAD_MULTIPLE}-aligned crop"),
        ));
    }
    Ok(crop)
}

/// One candidate drawn from a predicted seed: batch slot, seed position,
/// and the enclosing ground-truth instance.
struct TrainSeed {
    item: usize,
    row: usize,
    col: usize,
    label: u32,
}

fn collect_train_seeds(
    seed_plane: &[f64],
    crops: &[(Tensor, LabelMap)],
    side: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSeed>> {
    let mut all = Vec::new();
    for (item, (_, labels)) in crops.iter().enumerate() {
        let plane = &seed_plane[item * side * side..][..side * side];
        let s = Tensor::new(vec![side, side], plane.to_vec())?;
        for seed in sample_seeds(&s, &cfg.pipeline)? {
            let label = labels.get(seed.row, seed.col);
            if label > 0 {
                all.push(TrainSeed { item, row: seed.row, col: seed.col, label });
            }
        }
    }
    if all.len() > CANDIDATE_CAP {
        all.shuffle(rng);
        all.truncate(CANDIDATE_CAP);
        // deterministic graph layout regardless of the draw
        all.sort_by_key(|t| (t.item, t.row, t.col));
    }
    Ok(all)
}

struct StepLosses {
    seed: f64,
    instance: f64,
    total: f64,
    total_var: Var,
}

#[allow(clippy::too_many_arguments)]
fn build_step_loss(
    g: &mut Graph,
    heads: &model::HeadVars,
    phi1: (Var, Var),
    phi2: (Var, Var),
    o_const: Var,
    crops: &[(Tensor, LabelMap)],
    train_seeds: &[TrainSeed],
    side: usize,
    phase: Phase,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let plane = side * side;

    // seed-map component over the whole batch
    let mut seed_target = Vec::with_capacity(crops.len() * plane);
    for (_, labels) in crops {
        match phase {
            Phase::Pretrain => {
                seed_target.extend(labels.data().iter().map(|&l| f64::from(l > 0)));
            }
            Phase::Main => seed_target.extend_from_slice(boundary_distance(labels).data()),
        }
    }
    let seed_term = match phase {
        Phase::Pretrain => g.bce(heads.seed, &seed_target)?,
        Phase::Main => {
            let shape = g.value(heads.seed).shape().to_vec();
            let t = g.constant(Tensor::new(shape, seed_target)?);
            seed_loss(g, heads.seed, t)?
        }
    };

    // per-candidate mask component
    let mut terms = Vec::with_capacity(train_seeds.len());
    for ts in train_seeds {
        let rect = seed_window(ts.row, ts.col, side, side, cfg.pipeline.crop_size);
        let p_crop = g.crop(heads.pos, ts.item, rect.top, rect.left, rect.height, rect.width)?;
        let o_crop = g.crop(o_const, 0, rect.top, rect.left, rect.height, rect.width)?;
        let q_crop = g.add(p_crop, o_crop)?;
        let p_seed = g.pixel_gather(heads.pos, ts.item, ts.row, ts.col)?;
        let o_seed = g.pixel_gather(o_const, 0, ts.row, ts.col)?;
        let q_seed = g.add(p_seed, o_seed)?;
        let q_seed = g.broadcast_hw(q_seed, rect.height, rect.width)?;
        let offsets = g.sub(q_crop, q_seed)?;
        let e_crop = g.crop(heads.emb, ts.item, rect.top, rect.left, rect.height, rect.width)?;
        let logit = model::phi_graph(g, offsets, e_crop, phi1, phi2)?;

        let labels = &crops[ts.item].1;
        let mut mask = Vec::with_capacity(rect.area());
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                mask.push(f64::from(labels.get(y, x) == ts.label));
            }
        }
        let term = match phase {
            Phase::Pretrain => {
                let prob = g.sigmoid(logit);
                g.dice(prob, &mask)?
            }
            Phase::Main => {
                let pm: Vec<f64> = mask.iter().map(|&m| if m > 0.0 { 1.0 } else { -1.0 }).collect();
                g.lovasz_hinge(logit, &pm)?
            }
        };
        terms.push(term);
    }
    let inst_term = mean_of_terms(g, &terms)?;

    let total_var = g.add(seed_term, inst_term)?;
    Ok(StepLosses {
        seed: g.value(seed_term).data()[0],
        instance: g.value(inst_term).data()[0],
        total: g.value(total_var).data()[0],
        total_var,
    })
}

fn validate_params(
    params: &ModelParams,
    val: &[(Tensor, LabelMap)],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(val.len());
    let mut gts = Vec::with_capacity(val.len());
    for (img, labels) in val {
        preds.push(infer(img, params, &cfg.pipeline)?);
        gts.push(labels.clone());
    }
    let report = evaluate_dataset(&preds, &gts)?;
    Ok((report.pooled.f1_05, report.pooled.f1_mu))
}

/// Train a model in place over (image, label) pairs and return the best
/// validation checkpoint together with the full metrics history.
pub fn train(
    train_set: &[(Tensor, LabelMap)],
    val_set: &[(Tensor, LabelMap)],
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    for (img, labels) in train_set.iter().chain(val_set) {
        let s = img.shape();
        if s.len() != 3 || s[0] != params.config.in_channels {
            return Err(Error::invalid(
                "train",
                format!(
                    "image shape {s:?} does not match model input channels {}",
                    params.config.in_channels
                ),
            ));
        }
        if (labels.height(), labels.width()) != (s[1], s[2]) {
            return Err(Error::invalid("train", "image and label dimensions differ"));
        }
    }

    let side = effective_crop(cfg.crop, [train_set, &[]])?;
    let mut logger = Logger::open(&cfg.log_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let steps_per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(cfg.batch_size));
    let d_p = params.config.d_p;
    let o_grid = coordinate_grid(side, side, d_p).reshaped(vec![1, d_p, side, side])?;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut step_idx = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let total_epochs = cfg.pretrain_epochs + cfg.epochs;
    let mut adam: Option<Adam> = None;
    for epoch in 0..total_epochs {
        let phase = if epoch < cfg.pretrain_epochs { Phase::Pretrain } else { Phase::Main };
        // fresh moments when the objective changes
        if epoch == 0 || epoch == cfg.pretrain_epochs {
            let sizes: Vec<usize> =
                params.named_params().iter().map(|(_, t)| t.numel()).collect();
            adam = Some(Adam::new(cfg.lr, &sizes));
        }
        let adam = adam.as_mut().expect("optimizer initialized");

        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in 0..steps_per_epoch {
            let idxs: Vec<usize> = (0..cfg.batch_size)
                .map(|k| order[(chunk * cfg.batch_size + k) % order.len()])
                .collect();
            let mut crops = Vec::with_capacity(idxs.len());
            let mut batch = Vec::with_capacity(idxs.len() * params.config.in_channels * side * side);
            for &i in &idxs {
                let (img, labels) = &train_set[i];
                let (ci, cl) = augment_sample(img, labels, side, &mut rng)?;
                batch.extend_from_slice(ci.data());
                crops.push((ci, cl));
            }
            let x = Tensor::new(
                vec![idxs.len(), params.config.in_channels, side, side],
                batch,
            )?;

            let mut g = Graph::new();
            let xv = g.leaf(x, false);
            let (heads, net, named_vars) = params.forward_train(&mut g, xv)?;
            let o_const = g.constant(o_grid.clone());

            let seed_plane = g.value(heads.seed).data().to_vec();
            let train_seeds = collect_train_seeds(&seed_plane, &crops, side, cfg, &mut rng)?;
            let losses = build_step_loss(
                &mut g,
                &heads,
                net.phi1,
                net.phi2,
                o_const,
                &crops,
                &train_seeds,
                side,
                phase,
                cfg,
            )?;
            g.backward(losses.total_var)?;

            let grads: Vec<Option<Tensor>> =
                named_vars.iter().map(|&(_, v)| g.grad(v).cloned()).collect();
            let mut views = params.named_params_mut();
            let mut slots: Vec<&mut Tensor> = views.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut slots, &grads)?;

            step_idx += 1;
            epoch_total += losses.total;
            let rec = StepLog {
                step: step_idx,
                epoch,
                phase,
                seed_loss: losses.seed,
                instance_loss: losses.instance,
                total_loss: losses.total,
                candidates: train_seeds.len(),
            };
            logger.write(&rec)?;
            steps.push(rec);
        }

        let (val_f1_05, val_f1_mu) = if val_set.is_empty() {
            (None, None)
        } else {
            let (a, b) = validate_params(&params, val_set, cfg)?;
            (Some(a), Some(b))
        };
        if let Some(mu) = val_f1_mu {
            let improved = best.as_ref().map(|&(_, b, _)| mu > b).unwrap_or(true);
            if improved {
                best = Some((epoch, mu, params.clone()));
            }
        }
        let rec = EpochLog {
            epoch,
            phase,
            mean_total_loss: epoch_total / steps_per_epoch as f64,
            val_f1_05,
            val_f1_mu,
        };
        logger.write(&rec)?;
        epochs.push(rec);
    }
    logger.flush()?;

    let (best_epoch, best_f1_mu, final_params) = match best {
        Some((e, mu, p)) => (Some(e), mu, p),
        None => (None, f64::NAN, params),
    };
    Ok(TrainOutcome {
        params: final_params,
        steps,
        epochs,
        best_epoch,
        best_f1_mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureConfig;
    use crate::synth::{gen_sample, SynthConfig};

    fn tiny_dataset(n: usize, size: usize, seed: u64) -> Vec<(Tensor, LabelMap)> {
        let cfg = SynthConfig {
            size,
            count_min: 3,
            count_max: 6,
            radius_min: 3.0,
            radius_max: 7.0,
            channels: 1,
            seed,
            ..Default::default()
        };
        (0..n).map(|i| gen_sample(&cfg, i).unwrap()).collect()
    }

    fn tiny_params(seed: u64) -> ModelParams {
        ModelParams::build(ArchitectureConfig {
            in_channels: 1,
            widths: vec![4, 8],
            d_f: 8,
            d_p: 2,
            d_e: 2,
            phi_hidden: 8,
            seed,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            pretrain_epochs: 1,
            batch_size: 2,
            crop: 64,
            pipeline: PipelineConfig { crop_size: 32, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let err = train(&[], &[], tiny_params(0), &tiny_cfg());
        assert!(err.is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let data = tiny_dataset(1, 64, 9);
        let mut params = tiny_params(0);
        params.config.in_channels = 3;
        let params = ModelParams::build(params.config).unwrap();
        assert!(train(&data, &[], params, &tiny_cfg()).is_err());
    }

    #[test]
    fn runs_both_phases_and_logs_every_step() {
        let data = tiny_dataset(2, 64, 11);
        let cfg = TrainConfig { epochs: 2, pretrain_epochs: 1, ..tiny_cfg() };
        let out = train(&data, &[], tiny_params(1), &cfg).unwrap();
        // one step per epoch at batch 2 over 2 images
        assert_eq!(out.steps.len(), 3);
        assert_eq!(out.epochs.len(), 3);
        assert_eq!(out.steps[0].phase, Phase::Pretrain);
        assert_eq!(out.steps[1].phase, Phase::Main);
        assert!(out.steps.iter().all(|s| s.total_loss.is_finite()));
        assert!(out
            .steps
            .iter()
            .all(|s| (s.seed_loss + s.instance_loss - s.total_loss).abs() < 1e-12));
        assert!(out.best_epoch.is_none());
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let data = tiny_dataset(2, 64, 21);
        let cfg = tiny_cfg();
        let a = train(&data, &[], tiny_params(2), &cfg).unwrap();
        let b = train(&data, &[], tiny_params(2), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let ta: Vec<f64> = a.steps.iter().map(|s| s.total_loss).collect();
        let tb: Vec<f64> = b.steps.iter().map(|s| s.total_loss).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn pretrain_loss_trends_down() {
        let data = tiny_dataset(4, 64, 31);
        let cfg = TrainConfig {
            epochs: 0,
            pretrain_epochs: 6,
            batch_size: 2,
            crop: 64,
            pipeline: PipelineConfig { crop_size: 32, ..Default::default() },
            ..Default::default()
        };
        let out = train(&data, &[], tiny_params(3), &cfg).unwrap();
        let first = out.epochs.first().unwrap().mean_total_loss;
        let last = out.epochs.last().unwrap().mean_total_loss;
        assert!(
            last < first,
            "pretraining loss went from {first} to {last} without improving"
        );
    }

    #[test]
    fn validation_tracks_a_best_checkpoint() {
        let data = tiny_dataset(2, 64, 41);
        let val = tiny_dataset(1, 64, 42);
        let cfg = TrainConfig { epochs: 1, pretrain_epochs: 1, ..tiny_cfg() };
        let out = train(&data, &val, tiny_params(4), &cfg).unwrap();
        assert!(out.best_epoch.is_some());
        assert!(out.epochs.iter().all(|e| e.val_f1_mu.is_some()));
        let best = out.best_f1_mu;
        let max = out
            .epochs
            .iter()
            .filter_map(|e| e.val_f1_mu)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, max);
    }

    #[test]
    fn metrics_log_is_valid_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("metrics.jsonl");
        let data = tiny_dataset(2, 64, 51);
        let cfg = TrainConfig { log_path: Some(log.clone()), ..tiny_cfg() };
        let out = train(&data, &[], tiny_params(5), &cfg).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), out.steps.len() + out.epochs.len());
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("total_loss").is_some() || v.get("mean_total_loss").is_some());
        }
    }

    #[test]
    fn crop_clamps_to_image_and_stride() {
        let data = tiny_dataset(1, 96, 61);
        assert_eq!(effective_crop(256, [&data, &[]]).unwrap(), 96);
        assert_eq!(effective_crop(80, [&data, &[]]).unwrap(), 64);
        let small = tiny_dataset(1, 64, 62);
        assert!(effective_crop(31, [&small, &[]]).is_err());
    }
}
