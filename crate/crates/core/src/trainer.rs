//! Minibatch Adam on mean-squared error.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{EnsembleDataset, Sampler, Split};
use crate::error::{Error, Result};
use crate::field::model::ExplorableModel;
use crate::field::tape::{record_forward, record_mse, ModelVars, TapeInputs};
use crate::grad::{GradientReport, Tape};
use crate::metrics::{max_difference, psnr_capped, PSNR_CAP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` covers the training voxels once.
    pub steps_per_epoch: Option<usize>,
    pub lr_features: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Cosine decay of both rates to zero over the run.
    pub cosine: bool,
    /// Evaluate held-out members every this many epochs (and at the end).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4096,
            steps_per_epoch: None,
            lr_features: 5e-3,
            lr_decoder: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            seed: 0,
            cosine: false,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_features > 0.0 && self.lr_decoder > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    /// `None` when no held-out members exist or validation was skipped.
    pub val_mse: Option<f64>,
    pub seconds: f64,
}

/// Adam state for every learnable tensor, flattened in storage order.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &ExplorableModel, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = param_slices(model).iter().map(|s| s.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One update. `grads` and `lrs` follow [`ModelVars::all`] order.
    pub fn step(&mut self, model: &mut ExplorableModel, grads: &[&[f64]], lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, param) in param_slices_mut(model).into_iter().enumerate() {
            let (m, v, g, lr) = (&mut self.m[k], &mut self.v[k], grads[k], lrs[k]);
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                param[i] = (param[i] as f64 - step) as f32;
            }
        }
    }
}

fn param_slices(model: &ExplorableModel) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = model.features.structures().map(|g| g.values()).collect();
    for l in &model.decoder.layers {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    out
}

fn param_slices_mut(model: &mut ExplorableModel) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = Vec::new();
    for g in model.features.spatial.iter_mut().chain(model.features.lines.iter_mut()) {
        out.push(g.values_mut());
    }
    for l in &mut model.decoder.layers {
        out.push(&mut l.weight);
        out.push(&mut l.bias);
    }
    out
}

/// Learning rate per tensor in [`ModelVars::all`] order.
fn rates(model: &ExplorableModel, lr_features: f64, lr_decoder: f64) -> Vec<f64> {
    let n_feat = model.features.spatial.len() + model.features.lines.len();
    let n_dec = 2 * model.decoder.layers.len();
    std::iter::repeat_n(lr_features, n_feat)
        .chain(std::iter::repeat_n(lr_decoder, n_dec))
        .collect()
}

/// Loss and gradients for one batch.
pub fn batch_gradients(model: &ExplorableModel, x: &[[f64; 3]], p: &[f64], y: &[f64]) -> Result<(GradientReport, ModelVars)> {
    let mut tape = Tape::new();
    let vars = ModelVars::record(&mut tape, model, true);
    let pred = record_forward(&mut tape, model, &vars, &TapeInputs { x, p, coords: None })?;
    let loss = record_mse(&mut tape, pred, y);
    Ok((tape.backward(loss)?, vars))
}

/// Mean squared error over whole members, in normalized value units.
pub fn evaluate_mse(model: &ExplorableModel, data: &EnsembleDataset, members: &[usize]) -> Result<f64> {
    let sampler = Sampler::new(data, members)?;
    let dec = model.dense_decoder();
    let mut sse = 0.0;
    let mut n = 0usize;
    for &i in members {
        let b = sampler.full_member(data, i);
        let pred = model.forward_many_with(&dec, &b.x, &b.p)?;
        sse += pred.iter().zip(&b.y).map(|(a, y)| (a - y).powi(2)).sum::<f64>();
        n += b.y.len();
    }
    Ok(sse / n as f64)
}

/// Reconstruction scores of one member in normalized value units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub name: String,
    pub params: Vec<f64>,
    pub psnr: f64,
    pub md: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub members: Vec<MemberScore>,
    /// PSNR of the pooled squared error over every listed voxel.
    pub psnr: f64,
    /// Largest member MD.
    pub md: f64,
}

/// PSNR and MD of each member against its volume over the unit normalized
/// value range.
pub fn evaluate_members(model: &ExplorableModel, data: &EnsembleDataset, members: &[usize]) -> Result<EvalReport> {
    if members.is_empty() {
        return Err(Error::Data("no members to evaluate".into()));
    }
    let sampler = Sampler::new(data, members)?;
    let dec = model.dense_decoder();
    let mut rows = Vec::with_capacity(members.len());
    let (mut sse, mut n) = (0.0, 0usize);
    for &i in members {
        let b = sampler.full_member(data, i);
        let pred = model.forward_many_with(&dec, &b.x, &b.p)?;
        let e = &data.manifest.members[i];
        rows.push(MemberScore {
            name: e.name.clone(),
            params: e.params.clone(),
            psnr: psnr_capped(&pred, &b.y, 1.0)?,
            md: max_difference(&pred, &b.y)?,
        });
        sse += pred.iter().zip(&b.y).map(|(a, y)| (a - y).powi(2)).sum::<f64>();
        n += b.y.len();
    }
    let mse = sse / n as f64;
    let psnr = if mse == 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) };
    let md = rows.iter().map(|r| r.md).fold(0.0, f64::max);
    Ok(EvalReport { members: rows, psnr, md })
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    /// Optional sink for line-delimited JSON history records.
    pub history_sink: Option<&'a mut dyn Write>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig) -> Self {
        Self { cfg, history_sink: None }
    }

    /// Trains on the manifest's train split and validates on its test split.
    pub fn train(&mut self, model: &mut ExplorableModel, data: &EnsembleDataset) -> Result<Vec<EpochRecord>> {
        let train = data.indices(Split::Train);
        let held_out = data.indices(Split::Test);
        self.train_members(model, data, &train, &held_out)
    }

    pub fn train_members(
        &mut self,
        model: &mut ExplorableModel,
        data: &EnsembleDataset,
        train: &[usize],
        held_out: &[usize],
    ) -> Result<Vec<EpochRecord>> {
        let cfg = self.cfg.clone();
        cfg.validate()?;
        if data.domain().n_params() != model.n_params() {
            return Err(Error::Config("dataset and model disagree on parameter count".into()));
        }
        let sampler = Sampler::new(data, train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(model, &cfg);
        let steps = cfg
            .steps_per_epoch
            .unwrap_or_else(|| (train.len() * data.voxels_per_member()).div_ceil(cfg.batch_size))
            .max(1);
        let total_steps = (steps * cfg.epochs).max(1);
        let start = Instant::now();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut sum = 0.0;
            for step in 0..steps {
                let scale = if cfg.cosine {
                    let t = (epoch * steps + step) as f64 / total_steps as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                } else {
                    1.0
                };
                let (lf, ld) = (cfg.lr_features * scale, cfg.lr_decoder * scale);
                let batch = sampler.sample(data, cfg.batch_size, &mut rng);
                let diverged = || Error::TrainingDiverged { epoch, batch: step, lr_features: lf, lr_decoder: ld };
                let (report, vars) = match batch_gradients(model, &batch.x, &batch.p, &batch.y) {
                    Ok(r) => r,
                    Err(Error::NonFiniteGradient { .. }) => return Err(diverged()),
                    Err(e) => return Err(e),
                };
                if !report.loss.is_finite() {
                    return Err(diverged());
                }
                sum += report.loss;
                let grads: Vec<&[f64]> = vars.all().iter().map(|&v| report.get(v).expect("leaf").data()).collect();
                adam.step(model, &grads, &rates(model, lf, ld));
            }
            let validate = !held_out.is_empty() && ((epoch + 1) % cfg.val_every.max(1) == 0 || epoch + 1 == cfg.epochs);
            let val_mse = if validate { Some(evaluate_mse(model, data, held_out)?) } else { None };
            let rec = EpochRecord {
                epoch,
                train_mse: sum / steps as f64,
                val_mse,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = self.history_sink.as_mut() {
                serde_json::to_writer(&mut **w, &rec)?;
                writeln!(w)?;
            }
            history.push(rec);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::family::AnalyticFamily;
    use crate::field::arch::ArchConfig;
    use crate::field::model::test_support::tiny_arch;

    #[test]
    fn constant_dataset_is_fit_quickly() {
        let data = EnsembleDataset::synthesize(&AnalyticFamily::constant(0.5), 4, 0, 8, 1).unwrap();
        let mut model = ExplorableModel::new(tiny_arch(1), data.domain().clone(), 0).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 256, steps_per_epoch: Some(60), lr_decoder: 1e-2, ..Default::default() };
        let hist = Trainer::new(cfg).train(&mut model, &data).unwrap();
        let mse = evaluate_mse(&model, &data, &[0, 1, 2, 3]).unwrap();
        assert!(mse <= 1e-6, "mse {mse}, history {hist:?}");
    }

    #[test]
    fn evaluation_pools_members_and_agrees_with_mse() {
        let data = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 2, 2, 8, 1).unwrap();
        let model = ExplorableModel::new(tiny_arch(2), data.domain().clone(), 2).unwrap();
        let test = data.indices(Split::Test);
        let r = evaluate_members(&model, &data, &test).unwrap();
        let mse = evaluate_mse(&model, &data, &test).unwrap();
        assert!((r.psnr + 10.0 * mse.log10()).abs() < 1e-9);
        assert_eq!(r.members.len(), 2);
        assert_eq!(r.md, r.members.iter().map(|m| m.md).fold(0.0, f64::max));
        assert!(r.members.iter().all(|m| m.name.starts_with("test_")));
        assert!(evaluate_members(&model, &data, &[]).is_err());
    }

    #[test]
    fn singleton_step_reduces_error() {
        let data = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 2, 0, 8, 1).unwrap();
        let mut model = ExplorableModel::new(tiny_arch(2), data.domain().clone(), 3).unwrap();
        let x = [[0.1, -0.2, 0.3]];
        let p = data.normalized_params(0);
        let y = [0.8];
        let err = |m: &ExplorableModel| (m.forward(x[0], &p).unwrap() - y[0]).powi(2);
        let before = err(&model);
        let (report, vars) = batch_gradients(&model, &x, &p, &y).unwrap();
        // Plain gradient step at lr 1e-4 on every tensor.
        let grads: Vec<Vec<f64>> = vars.all().iter().map(|&v| report.get(v).unwrap().data().to_vec()).collect();
        for (param, g) in param_slices_mut(&mut model).into_iter().zip(&grads) {
            for (w, d) in param.iter_mut().zip(g) {
                *w = (*w as f64 - 1e-4 * d) as f32;
            }
        }
        assert!(err(&model) < before);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let data = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 3, 1, 8, 1).unwrap();
        let run = || {
            let mut model = ExplorableModel::new(tiny_arch(2), data.domain().clone(), 7).unwrap();
            let cfg = TrainConfig { epochs: 2, batch_size: 128, steps_per_epoch: Some(10), seed: 4, ..Default::default() };
            let h = Trainer::new(cfg).train(&mut model, &data).unwrap();
            (model, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha[1].train_mse.to_bits(), hb[1].train_mse.to_bits());
    }

    #[test]
    fn history_is_written_as_json_lines() {
        let data = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 2, 1, 8, 1).unwrap();
        let mut model = ExplorableModel::new(ArchConfig { n_params: 2, ..tiny_arch(2) }, data.domain().clone(), 1).unwrap();
        let mut buf: Vec<u8> = Vec::new();
        {
            let mut t = Trainer::new(TrainConfig { epochs: 3, batch_size: 64, steps_per_epoch: Some(2), ..Default::default() });
            t.history_sink = Some(&mut buf);
            t.train(&mut model, &data).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        for key in ["epoch", "train_mse", "val_mse", "seconds"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn diverging_rate_is_reported() {
        let data = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 2, 0, 8, 1).unwrap();
        let mut model = ExplorableModel::new(tiny_arch(2), data.domain().clone(), 1).unwrap();
        let cfg = TrainConfig { epochs: 50, batch_size: 64, steps_per_epoch: Some(20), lr_decoder: 1e30, lr_features: 1e30, ..Default::default() };
        match Trainer::new(cfg).train(&mut model, &data) {
            Err(Error::TrainingDiverged { lr_decoder, .. }) => assert_eq!(lr_decoder, 1e30),
            other => panic!("expected divergence, got {:?}", other.map(|h| h.len())),
        }
    }
}
