//! Training loop, loss bookkeeping, checkpoint persistence, and the
//! finite-difference gradient verification harness.

use crate::captioner::{self, CaptionBatch, Vocab, BOS, EOS};
use crate::dalt;
use crate::distill::{self, Bandwidth};
use crate::error::{Error, Result};
use crate::hcm_occ::{self, DirectionalVectors};
use crate::model::{self, Ablation, Model, ModelConfig, PairInput, StepPlan};
use crate::nn::{Adam, Binder, ParamSet};
use crate::patchenc::Nonlinearity;
use crate::scenegen::{self, PairRecord, Split};
use crate::tape::{Elem, Tape, Var};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Everything one training run needs; JSON configs mirror these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: String,
    pub out_dir: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub radius: i64,
    pub theta: f64,
    pub bandwidth: Bandwidth,
    pub seed: u64,
    pub dim: usize,
    pub dim_in: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub noise_sigma: f64,
    pub max_caption_len: usize,
    pub max_shift: i64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub ablation: Ablation,
    /// Optional vocabulary JSON; derived from the dataset when absent.
    pub vocab: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "dataset.jsonl".into(),
            out_dir: "run".into(),
            learning_rate: 3e-4,
            batch_size: 8,
            iterations: 2000,
            lambda: 0.01,
            tau: 0.07,
            gamma: 0.3,
            radius: 2,
            theta: 0.2,
            bandwidth: Bandwidth::Median,
            seed: 0,
            dim: 64,
            dim_in: 64,
            heads: 2,
            ffn_hidden: 128,
            noise_sigma: 0.1,
            max_caption_len: 40,
            max_shift: 2,
            val_fraction: 0.1,
            test_fraction: 0.1,
            ablation: Ablation::None,
            vocab: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings reported for the original training regime.
    pub fn paper_preset() -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 32,
            iterations: 10_000,
            dim: 512,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (HSIC and in-batch negatives)".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.dim_in,
            d: self.dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            tau: self.tau,
            gamma: self.gamma,
            radius: self.radius,
            theta: self.theta,
            bandwidth: self.bandwidth,
            max_caption_len: self.max_caption_len,
            activation: Nonlinearity::Relu,
            max_shift: self.max_shift,
        }
    }
}

/// Named scalar losses for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_cap: f64,
    pub l_glo: f64,
    pub l_reg: f64,
    pub l_hsic: f64,
    pub l_align: f64,
    pub total: f64,
}

/// Weighted objective from named parts; rejects non-finite inputs,
/// naming the offending part.
pub fn total_loss(
    l_cap: f64,
    l_glo: f64,
    l_reg: f64,
    l_hsic: f64,
    l_align: f64,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be nonnegative".into()));
    }
    for (name, value) in [
        ("l_cap", l_cap),
        ("l_glo", l_glo),
        ("l_reg", l_reg),
        ("l_hsic", l_hsic),
        ("l_align", l_align),
    ] {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss part {name} is not finite")));
        }
    }
    Ok(l_cap + lambda * (l_glo + l_reg + l_hsic + l_align))
}

/// Per-record raw renders, cached once per run.
pub struct RenderedDataset<F: Elem> {
    pub records: Vec<PairRecord>,
    pub raw: Vec<(Array2<F>, Array2<F>)>,
    pub split: Split,
}

pub fn load_and_render<F: Elem>(config: &TrainConfig) -> Result<RenderedDataset<F>> {
    let records = scenegen::read_dataset(&config.dataset)?;
    if records.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} holds no records",
            config.dataset
        )));
    }
    let split = scenegen::split_dataset(
        &records,
        config.val_fraction,
        config.test_fraction,
        config.seed,
    )?;
    let mut raw = Vec::with_capacity(records.len());
    for record in &records {
        let bef = scenegen::render::<F>(
            &record.before,
            config.dim_in,
            config.noise_sigma,
            record.seed.wrapping_mul(2),
        )?;
        let aft = scenegen::render::<F>(
            &record.after,
            config.dim_in,
            config.noise_sigma,
            record.seed.wrapping_mul(2).wrapping_add(1),
        )?;
        raw.push((bef, aft));
    }
    Ok(RenderedDataset {
        records,
        raw,
        split,
    })
}

/// Outcome of a training run.
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

pub fn train(config: &TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let data = load_and_render::<f32>(config)?;
    if data.split.train.len() < config.batch_size {
        return Err(Error::Config(format!(
            "train split of {} pairs cannot fill batches of {}",
            data.split.train.len(),
            config.batch_size
        )));
    }
    let vocab = match &config.vocab {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Parse {
                    line: 0,
                    message: e.to_string(),
                })?;
            Vocab::from_json(&value)?
        }
        None => Vocab::from_records(&data.records),
    };
    let mut model: Model<f32> = Model::init(config.model_config(), vocab, config.seed);
    let mut adam: Adam<f32> = Adam::new(config.learning_rate as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let mut reports = Vec::with_capacity(config.iterations);
    for step in 1..=config.iterations {
        let batch_idx: Vec<usize> = data
            .split
            .train
            .choose_multiple(&mut rng, config.batch_size)
            .copied()
            .collect();
        let plan = StepPlan {
            caption_variant: (0..config.batch_size).map(|_| rng.gen_range(0..2)).collect(),
            negative: sample_negatives(&mut rng, config.batch_size),
            ablation_seed: rng.gen(),
        };
        let pairs: Vec<PairInput<f32>> = batch_idx
            .iter()
            .map(|&i| PairInput {
                record: &data.records[i],
                raw_bef: &data.raw[i].0,
                raw_aft: &data.raw[i].1,
            })
            .collect();

        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &model.params, true);
        let vars = model::bind_model(&mut binder, &model.config);
        let bound = binder.finish();
        let losses = model::step_loss(
            &mut tape,
            &vars,
            &model.vocab,
            &pairs,
            &plan,
            &model.config,
            config.ablation,
            config.lambda,
        )?;

        let report = LossReport {
            step,
            l_cap: tape.scalar(losses.l_cap).as_f64(),
            l_glo: tape.scalar(losses.l_glo).as_f64(),
            l_reg: tape.scalar(losses.l_reg).as_f64(),
            l_hsic: tape.scalar(losses.l_hsic).as_f64(),
            l_align: tape.scalar(losses.l_align).as_f64(),
            total: tape.scalar(losses.total).as_f64(),
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: total loss is not finite"
            )));
        }
        let recombined = total_loss(
            report.l_cap,
            report.l_glo,
            report.l_reg,
            report.l_hsic,
            report.l_align,
            config.lambda,
        )?;
        debug_assert!(
            (report.total - recombined).abs() <= 1e-4 * (1.0 + recombined.abs()),
            "loss identity violated at step {step}"
        );

        let grads_by_var = tape.backward(losses.total);
        let mut grads: IndexMap<String, Array2<f32>> = IndexMap::new();
        for (name, var) in bound {
            let shape = model.params.get(&name).dim();
            grads.insert(name, grads_by_var.wrt(var, shape));
        }
        adam.step(&mut model.params, &grads);
        reports.push(report);
    }

    let out_dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let log_path = out_dir.join("loss_log.jsonl");
    let mut log = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    for report in &reports {
        let line = serde_json::to_string(report)
            .map_err(|e| Error::Numeric(format!("serialize loss report: {e}")))?;
        writeln!(log, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }
    let checkpoint_dir = out_dir.join("checkpoint");
    save_checkpoint(&checkpoint_dir, &model.params, &model.vocab, config)?;

    Ok(TrainSummary {
        reports,
        checkpoint_dir,
        log_path,
    })
}

fn sample_negatives<R: Rng>(rng: &mut R, batch: usize) -> Vec<usize> {
    (0..batch)
        .map(|i| {
            let mut j = rng.gen_range(0..batch - 1);
            if j >= i {
                j += 1;
            }
            j
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpointing

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet<f32>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, value) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: value.nrows(),
            cols: value.ncols(),
            offset: blob.len(),
        });
        for &x in value.iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f32".into(),
        tensors,
    };
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
    )?;
    write("params.bin", &blob)?;
    write(
        "vocab.json",
        serde_json::to_string_pretty(&vocab.to_json()).unwrap().as_bytes(),
    )?;
    write(
        "config.json",
        serde_json::to_string_pretty(config).unwrap().as_bytes(),
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet<f32>, Vocab, TrainConfig)> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?).map_err(|e| {
        Error::Parse {
            line: 0,
            message: format!("manifest.json: {e}"),
        }
    })?;
    if manifest.dtype != "f32" {
        return Err(Error::Config(format!(
            "unsupported checkpoint dtype {}",
            manifest.dtype
        )));
    }
    let blob = read("params.bin")?;
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let count = entry.rows * entry.cols;
        let start = entry.offset;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::Config(format!(
                "tensor {} overruns params.bin",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(count);
        for k in 0..count {
            let at = start + k * 4;
            values.push(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()));
        }
        let array = Array2::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| Error::Dimension(format!("tensor {}: {e}", entry.name)))?;
        params.insert(entry.name.clone(), array);
    }
    let vocab_value: serde_json::Value =
        serde_json::from_slice(&read("vocab.json")?).map_err(|e| Error::Parse {
            line: 0,
            message: format!("vocab.json: {e}"),
        })?;
    let vocab = Vocab::from_json(&vocab_value)?;
    let config: TrainConfig =
        serde_json::from_slice(&read("config.json")?).map_err(|e| Error::Parse {
            line: 0,
            message: format!("config.json: {e}"),
        })?;
    Ok((params, vocab, config))
}

pub fn load_model(dir: &Path) -> Result<(Model<f32>, TrainConfig)> {
    let (params, vocab, config) = load_checkpoint(dir)?;
    let model = Model {
        params,
        vocab,
        config: config.model_config(),
    };
    Ok((model, config))
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Worst relative error per parameter block for one component.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub instances: usize,
    pub blocks: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

pub const GRAD_CHECK_COMPONENTS: [&str; 7] = [
    "probe",
    "info-nce",
    "hsic",
    "alignment",
    "caption",
    "distill-difference",
    "encode-regions",
];

/// Compare analytic gradients against central finite differences on
/// randomized tiny instances of the named component.
pub fn grad_check(component: &str, epsilon: f64, seed: u64, instances: usize) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if !GRAD_CHECK_COMPONENTS.contains(&component) {
        return Err(Error::Usage(format!(
            "unknown component `{component}`; expected one of {GRAD_CHECK_COMPONENTS:?}"
        )));
    }
    let mut blocks: IndexMap<String, f64> = IndexMap::new();
    let mut done = 0usize;
    let mut attempt = 0u64;
    while done < instances {
        attempt += 1;
        if attempt > 20 * instances as u64 {
            return Err(Error::Numeric(format!(
                "could not sample {instances} usable instances for {component}"
            )));
        }
        let instance_seed = seed
            .wrapping_mul(0x9e37_79b9)
            .wrapping_add(attempt);
        match check_instance(component, epsilon, instance_seed, &mut blocks)? {
            true => done += 1,
            false => continue, // too close to a kink; resample
        }
    }
    let max_rel_err = blocks.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        component: component.to_string(),
        instances,
        blocks: blocks.into_iter().collect(),
        max_rel_err,
    })
}

/// Minimum distance any ReLU/hinge input must keep from zero for an
/// instance to count; below this the FD stencil may straddle the kink.
const KINK_MARGIN: f64 = 1e-3;

fn check_instance(
    component: &str,
    epsilon: f64,
    seed: u64,
    blocks: &mut IndexMap<String, f64>,
) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = build_instance_params(component, &mut rng);
    let probe_seed: u64 = rng.gen();

    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, &params, true);
    let loss = build_instance_loss(component, &mut binder, probe_seed)?;
    let bound = binder.finish();
    if tape.kink_margin() < KINK_MARGIN {
        return Ok(false);
    }
    let grads = tape.backward(loss);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, p, true);
        let l = build_instance_loss(component, &mut b, probe_seed)?;
        drop(b);
        Ok(t.scalar(l))
    };

    for (name, var) in &bound {
        let shape = params.get(name).dim();
        let analytic = grads.wrt(*var, shape);
        let mut worst = blocks.get(name).copied().unwrap_or(0.0);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = params.clone();
                plus.get_mut(name)[[r, c]] += epsilon;
                let mut minus = params.clone();
                minus.get_mut(name)[[r, c]] -= epsilon;
                let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
                let a = analytic[[r, c]];
                if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
                    continue;
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                worst = worst.max(rel);
            }
        }
        blocks.insert(name.clone(), worst);
    }
    Ok(true)
}

fn randn_seeded(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| f64::std_normal(&mut rng))
}

/// Trainable leaves (and module parameters) for one tiny instance.
fn build_instance_params(component: &str, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut params = ParamSet::new();
    let randn = |rng: &mut ChaCha8Rng, n: usize, d: usize| {
        Array2::from_shape_fn((n, d), |_| f64::std_normal(rng))
    };
    match component {
        "probe" => {
            params.insert("theta", randn(rng, 3, 4));
        }
        "info-nce" | "hsic" => {
            let b = rng.gen_range(2..=5);
            let d = rng.gen_range(3..=6);
            params.insert("a", randn(rng, b, d));
            params.insert("b", randn(rng, b, d));
        }
        "alignment" => {
            let d = rng.gen_range(3..=6);
            for name in ["delta_t", "delta_d", "neg_t", "neg_d"] {
                params.insert(name, randn(rng, 1, d));
            }
        }
        "caption" => {
            captioner::init_params(&mut params, 7, 4, 8, rng);
        }
        "distill-difference" => {
            distill::init_params(&mut params, 4, rng);
        }
        "encode-regions" => {
            dalt::init_params(&mut params, 4, 8, rng);
        }
        other => panic!("unchecked component {other}"),
    }
    params
}

/// Loss graph for one tiny instance; all non-parameter inputs derive
/// deterministically from `probe_seed` so FD re-evaluations see the same
/// data.
fn build_instance_loss(
    component: &str,
    binder: &mut Binder<f64>,
    probe_seed: u64,
) -> Result<Var> {
    match component {
        "probe" => {
            let theta = binder.bind("theta");
            let tape = binder.tape();
            let sq = tape.mul(theta, theta);
            Ok(tape.sum_all(sq))
        }
        "info-nce" => {
            let a = binder.bind("a");
            let b = binder.bind("b");
            distill::info_nce(binder.tape(), a, b, 0.07)
        }
        "hsic" => {
            let a = binder.bind("a");
            let b = binder.bind("b");
            // Fixed bandwidth: the median heuristic is a constant to the
            // gradient, which finite differences would disagree with.
            distill::hsic_loss(binder.tape(), a, b, Bandwidth::Fixed(0.7))
        }
        "alignment" => {
            let dv = DirectionalVectors {
                delta_t: binder.bind("delta_t"),
                delta_d: binder.bind("delta_d"),
                neg_t: vec![binder.bind("neg_t")],
                neg_d: vec![binder.bind("neg_d")],
            };
            let out = hcm_occ::alignment_loss(binder.tape(), &dv, 0.3)?;
            Ok(out.loss)
        }
        "caption" => {
            let (vars, out) = captioner::bind(binder, 2);
            let tape = binder.tape();
            let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
            let d_repr = tape.constant(randn_seeded(probe_seed ^ 1, 3, 4));
            let body_len = rng.gen_range(1..=3);
            let mut ids = vec![BOS];
            ids.extend((0..body_len).map(|_| rng.gen_range(3..7)));
            ids.push(EOS);
            let decoded = captioner::decode_sequence(tape, d_repr, &ids, &vars, &out, false)?;
            let batch = CaptionBatch::new(vec![ids])?;
            captioner::caption_loss(tape, &[decoded.logits], &batch)
        }
        "distill-difference" => {
            let vars = distill::bind(binder, 2);
            let tape = binder.tape();
            let x_src = tape.constant(randn_seeded(probe_seed ^ 2, 3, 4));
            let x_tgt = tape.constant(randn_seeded(probe_seed ^ 3, 3, 4));
            let c_src = tape.constant(randn_seeded(probe_seed ^ 4, 1, 4));
            let c_tgt = tape.constant(randn_seeded(probe_seed ^ 5, 1, 4));
            let d_tgt = tape.constant(randn_seeded(probe_seed ^ 6, 1, 4));
            let mask = [1u8, 0, 1];
            let repr = distill::distill_difference(
                tape, x_src, x_tgt, &mask, &mask, c_src, c_tgt, d_tgt, &vars,
            )?;
            let probe = randn_seeded(probe_seed ^ 7, 3, 4);
            let weighted = tape.mul_const(repr.d, &probe);
            Ok(tape.sum_all(weighted))
        }
        "encode-regions" => {
            let vars = dalt::bind(binder, 2);
            let tape = binder.tape();
            let x_val = randn_seeded(probe_seed ^ 8, 5, 4);
            let mask = [1u8, 0, 1, 1, 0];
            let dec = dalt::decompose(&x_val, &mask)?;
            let x = tape.constant(x_val);
            let rf = dalt::encode_regions(tape, x, &dec, &vars)?;
            let probe = randn_seeded(probe_seed ^ 9, 5, 4);
            let weighted = tape.mul_const(rf.patch_features, &probe);
            let mut loss = tape.sum_all(weighted);
            for (k, region) in dalt::Region::ALL.iter().enumerate() {
                let p = randn_seeded(probe_seed ^ (10 + k as u64), 1, 4);
                let wc = tape.mul_const(rf.cls(*region), &p);
                let sc = tape.sum_all(wc);
                loss = tape.add(loss, sc);
            }
            Ok(loss)
        }
        other => panic!("unchecked component {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_caption, run_frozen};
    use crate::scenegen::GenConfig;

    #[test]
    fn total_loss_with_zero_lambda_is_caption_loss() {
        let total = total_loss(2.5, 0.4, 0.3, 0.2, 0.1, 0.0).unwrap();
        assert_eq!(total, 2.5);
    }

    #[test]
    fn total_loss_arithmetic_matches_hand_value() {
        // l_cap 1.0, context parts summing to 0.5, alignment 0.3.
        let total = total_loss(1.0, 0.25, 0.15, 0.10, 0.3, 0.01).unwrap();
        assert!((total - 1.008).abs() < 1e-12);
    }

    #[test]
    fn default_lambda_is_one_percent() {
        assert_eq!(TrainConfig::default().lambda, 0.01);
    }

    #[test]
    fn paper_preset_records_full_scale_settings() {
        let preset = TrainConfig::paper_preset();
        assert_eq!(preset.learning_rate, 2e-4);
        assert_eq!(preset.batch_size, 32);
        assert_eq!(preset.iterations, 10_000);
        assert_eq!(preset.dim, 512);
    }

    #[test]
    fn non_finite_part_is_rejected_by_name() {
        match total_loss(1.0, f64::NAN, 0.0, 0.0, 0.0, 0.01) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("l_glo"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    fn tiny_config(dir: &Path, dataset: &Path) -> TrainConfig {
        TrainConfig {
            dataset: dataset.display().to_string(),
            out_dir: dir.display().to_string(),
            iterations: 6,
            batch_size: 3,
            dim: 32,
            dim_in: 32,
            ffn_hidden: 64,
            max_shift: 1,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn write_tiny_dataset(path: &Path, pairs: u64) {
        let config = GenConfig {
            height: 6,
            width: 6,
            max_shift: 1,
            num_changes: 1,
            ..GenConfig::default()
        };
        let records: Vec<PairRecord> = (0..pairs)
            .map(|s| scenegen::generate_pair(s, &config).unwrap())
            .collect();
        scenegen::write_dataset(&records, path).unwrap();
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("d.jsonl");
        write_tiny_dataset(&dataset, 12);
        let c1 = tiny_config(&dir.path().join("run1"), &dataset);
        let c2 = tiny_config(&dir.path().join("run2"), &dataset);
        let s1 = train(&c1).unwrap();
        let s2 = train(&c2).unwrap();
        assert_eq!(s1.reports, s2.reports);
        assert_eq!(s1.reports.len(), 6);
        for r in &s1.reports {
            let recombined =
                total_loss(r.l_cap, r.l_glo, r.l_reg, r.l_hsic, r.l_align, c1.lambda).unwrap();
            assert!(
                (r.total - recombined).abs() <= 1e-4 * (1.0 + recombined.abs()),
                "step {}: {} vs {}",
                r.step,
                r.total,
                recombined
            );
        }
        // Log file holds one JSON object per step.
        let text = std::fs::read_to_string(&s1.log_path).unwrap();
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn checkpoint_round_trips_parameters_and_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("d.jsonl");
        write_tiny_dataset(&dataset, 8);
        let config = tiny_config(&dir.path().join("run"), &dataset);
        let summary = train(&config).unwrap();
        let (model, loaded_config) = load_model(&summary.checkpoint_dir).unwrap();
        assert_eq!(loaded_config, config);

        // Forward outputs on a probe pair must be identical after reload.
        let data = load_and_render::<f32>(&config).unwrap();
        let input = PairInput {
            record: &data.records[0],
            raw_bef: &data.raw[0].0,
            raw_aft: &data.raw[0].1,
        };
        let caption_a = generate_caption(&model, &input, Ablation::None).unwrap();
        let (model2, _) = load_model(&summary.checkpoint_dir).unwrap();
        let caption_b = generate_caption(&model2, &input, Ablation::None).unwrap();
        assert_eq!(caption_a, caption_b);
        let (tape_a, pf_a) = run_frozen(&model, &input, Ablation::None).unwrap();
        let (tape_b, pf_b) = run_frozen(&model2, &input, Ablation::None).unwrap();
        assert_eq!(
            tape_a.value(pf_a.repr_fwd.d),
            tape_b.value(pf_b.repr_fwd.d)
        );
    }

    #[test]
    fn masks_are_constants_to_the_gradient() {
        // Analytic gradients must equal finite differences taken with the
        // voting result frozen: the mask path carries no gradient.
        let config = GenConfig {
            height: 4,
            width: 4,
            max_shift: 1,
            num_changes: 1,
            ..GenConfig::default()
        };
        let record = scenegen::generate_pair(3, &config).unwrap();
        let model_config = ModelConfig {
            d_in: 16,
            d: 8,
            heads: 2,
            ffn_hidden: 16,
            ..ModelConfig::default()
        };
        let vocab = Vocab::from_records(&[record.clone()]);
        let model: Model<f64> = Model::init(model_config.clone(), vocab, 5);
        let raw_bef =
            scenegen::render::<f64>(&record.before, 16, 0.05, 1).unwrap();
        let raw_aft = scenegen::render::<f64>(&record.after, 16, 0.05, 2).unwrap();
        let input = PairInput {
            record: &record,
            raw_bef: &raw_bef,
            raw_aft: &raw_aft,
        };
        let probe = randn_seeded(77, 16, 8);

        // Masks computed once at the base parameters.
        let (_, pf0) = run_frozen(&model, &input, Ablation::None).unwrap();
        let vote = pf0.vote.clone();

        let loss_of = |params: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, params, true);
            let vars = model::bind_model(&mut binder, &model_config);
            drop(binder);
            let pf = model::forward_pair(
                &mut tape,
                &vars,
                &input,
                &model_config,
                Ablation::None,
                0,
                Some(&vote),
            )
            .unwrap();
            let w = tape.mul_const(pf.repr_fwd.d, &probe);
            let l = tape.sum_all(w);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &model.params, true);
        let vars = model::bind_model(&mut binder, &model_config);
        let bound = binder.finish();
        let pf = model::forward_pair(
            &mut tape,
            &vars,
            &input,
            &model_config,
            Ablation::None,
            0,
            Some(&vote),
        )
        .unwrap();
        let w = tape.mul_const(pf.repr_fwd.d, &probe);
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        let (name, var) = bound
            .iter()
            .find(|(n, _)| n == "patchenc.w")
            .expect("encoder weights bound");
        let shape = model.params.get(name).dim();
        let analytic = grads.wrt(*var, shape);
        for k in [0usize, shape.0 * shape.1 / 3, shape.0 * shape.1 - 1] {
            let (r, c) = (k / shape.1, k % shape.1);
            let mut plus = model.params.clone();
            plus.get_mut(name)[[r, c]] += eps;
            let mut minus = model.params.clone();
            minus.get_mut(name)[[r, c]] -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let a = analytic[[r, c]];
            if a.abs() < 1e-6 && numeric.abs() < 1e-6 {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            assert!(rel < 1e-4, "{name}[{r},{c}]: {a} vs {numeric} (rel {rel})");
        }
    }

    #[test]
    fn quadratic_probe_gradient_is_essentially_exact() {
        let report = grad_check("probe", 1e-5, 0, 3).unwrap();
        assert!(
            report.max_rel_err <= 1e-9,
            "probe rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn alignment_component_passes_grad_check() {
        let report = grad_check("alignment", 1e-5, 1, 5).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "alignment rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn unknown_component_is_a_usage_error() {
        assert!(matches!(
            grad_check("nonsense", 1e-5, 0, 1),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            grad_check("probe", 1e-2, 0, 1),
            Err(Error::Config(_))
        ));
    }
}
