//! Full model assembly: parameters, the per-pair forward pass (render ->
//! embed -> vote -> region encode -> distill), per-step loss composition,
//! and frozen-parameter inference for caption generation.

use crate::captioner::{self, CaptionBatch, Vocab};
use crate::dalt;
use crate::distill::{self, Bandwidth, ContextVectors, DifferenceRepr};
use crate::error::{Error, Result};
use crate::hcm_occ::{self, DirectionalVectors};
use crate::nn::{sinusoidal_grid, Binder, LinearVars, ParamSet};
use crate::patchenc::{self, Nonlinearity};
use crate::scenegen::PairRecord;
use crate::shiftvote::{self, VoteResult, NO_WINDOW};
use crate::tape::{softmax_of, Elem, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Module-behavior toggles used by the ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Overlap mask forced to all ones.
    NoMask,
    /// Mask replaced by a seeded Bernoulli(0.5) draw per patch.
    RandomMask,
    /// Dominant shift replaced by a uniform draw.
    RandomDirectionWindow,
    /// Direction-window filter disabled (infinite radius).
    NoDirectionWindow,
    /// Orientation-consistency loss weight forced to zero.
    NoHcmOcc,
}

impl Ablation {
    pub const NAMES: [(&'static str, Ablation); 6] = [
        ("none", Ablation::None),
        ("no-mask", Ablation::NoMask),
        ("random-mask", Ablation::RandomMask),
        ("random-direction-window", Ablation::RandomDirectionWindow),
        ("no-direction-window", Ablation::NoDirectionWindow),
        ("no-hcm-occ", Ablation::NoHcmOcc),
    ];

    pub fn parse(name: &str) -> Result<Ablation> {
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::Usage(format!("unknown ablation variant `{name}`")))
    }
}

/// Architecture and alignment hyperparameters (everything the forward
/// pass needs besides the dataset itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub tau: f64,
    pub gamma: f64,
    pub radius: i64,
    pub theta: f64,
    pub bandwidth: Bandwidth,
    pub max_caption_len: usize,
    pub activation: Nonlinearity,
    /// Range for the random-direction-window ablation draw.
    pub max_shift: i64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 64,
            d: 64,
            heads: 2,
            ffn_hidden: 128,
            tau: shiftvote::DEFAULT_TAU,
            gamma: hcm_occ::DEFAULT_GAMMA,
            radius: shiftvote::DEFAULT_RADIUS,
            theta: shiftvote::DEFAULT_THETA,
            bandwidth: Bandwidth::Median,
            max_caption_len: 40,
            activation: Nonlinearity::Relu,
            max_shift: 2,
        }
    }
}

/// Parameters + vocabulary + architecture, generic over precision.
pub struct Model<F: Elem> {
    pub params: ParamSet<F>,
    pub vocab: Vocab,
    pub config: ModelConfig,
}

impl<F: Elem> Model<F> {
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Model<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        patchenc::init_params(&mut params, config.d_in, config.d, &mut rng);
        dalt::init_params(&mut params, config.d, config.ffn_hidden, &mut rng);
        distill::init_params(&mut params, config.d, &mut rng);
        captioner::init_params(
            &mut params,
            vocab.size(),
            config.d,
            config.ffn_hidden,
            &mut rng,
        );
        Model {
            params,
            vocab,
            config,
        }
    }
}

/// All module parameter handles bound onto one tape.
pub struct ModelVars {
    pub enc: patchenc::EncoderVars,
    pub dalt: dalt::DaltVars,
    pub distill: distill::DistillVars,
    pub dec: captioner::DecoderVars,
    pub out: LinearVars,
}

/// Bind every module's parameters (used by both training and inference).
pub fn bind_model<F: Elem>(binder: &mut Binder<F>, config: &ModelConfig) -> ModelVars {
    let enc = patchenc::bind(binder, config.activation);
    let dalt_vars = dalt::bind(binder, config.heads);
    let distill_vars = distill::bind(binder, config.heads);
    let (dec, out) = captioner::bind(binder, config.heads);
    ModelVars {
        enc,
        dalt: dalt_vars,
        distill: distill_vars,
        dec,
        out,
    }
}

/// One training pair plus its pre-rendered raw patches.
pub struct PairInput<'a, F: Elem> {
    pub record: &'a PairRecord,
    pub raw_bef: &'a Array2<F>,
    pub raw_aft: &'a Array2<F>,
}

/// Everything the forward pass produces for one pair.
pub struct PairForward {
    pub x_bef: Var,
    pub x_aft: Var,
    pub rf_bef: dalt::RegionFeatures,
    pub rf_aft: dalt::RegionFeatures,
    pub cv: ContextVectors,
    pub repr_fwd: DifferenceRepr,
    pub repr_rev: DifferenceRepr,
    pub vote: VoteResult,
}

/// Visual pipeline for one pair. Shift voting runs on detached embedded
/// features; its masks and dominant shift enter the graph as constants.
#[allow(clippy::too_many_arguments)]
pub fn forward_pair<F: Elem>(
    tape: &mut Tape<F>,
    vars: &ModelVars,
    input: &PairInput<F>,
    config: &ModelConfig,
    ablation: Ablation,
    ablation_seed: u64,
    mask_override: Option<&VoteResult>,
) -> Result<PairForward> {
    let record = input.record;
    let grid = (record.before.height, record.before.width);
    let n = grid.0 * grid.1;
    if input.raw_bef.nrows() != n || input.raw_aft.nrows() != n {
        return Err(Error::Dimension(format!(
            "raw patches ({} / {}) do not fill a {}x{} grid",
            input.raw_bef.nrows(),
            input.raw_aft.nrows(),
            grid.0,
            grid.1
        )));
    }

    let raw_b = tape.constant(input.raw_bef.clone());
    let raw_a = tape.constant(input.raw_aft.clone());
    let emb_b = patchenc::embed(tape, raw_b, &vars.enc);
    let emb_a = patchenc::embed(tape, raw_a, &vars.enc);

    let vote = match mask_override {
        Some(v) => v.clone(),
        None => {
            let feats_b = tape.value(emb_b);
            let feats_a = tape.value(emb_a);
            compute_vote(feats_b, feats_a, grid, config, ablation, ablation_seed)?
        }
    };

    let pe = sinusoidal_grid::<F>(grid.0, grid.1, config.d);
    let x_bef = tape.add_const(emb_b, &pe);
    let x_aft = tape.add_const(emb_a, &pe);

    let dec_b = dalt::decompose(tape.value(x_bef), &vote.mask_bef)?;
    let dec_a = dalt::decompose(tape.value(x_aft), &vote.mask_aft)?;
    let rf_bef = dalt::encode_regions(tape, x_bef, &dec_b, &vars.dalt)?;
    let rf_aft = dalt::encode_regions(tape, x_aft, &dec_a, &vars.dalt)?;

    let cv = distill::context_encode(tape, &rf_bef, &rf_aft, &vars.distill);
    let repr_fwd = distill::distill_difference(
        tape,
        x_bef,
        x_aft,
        &vote.mask_bef,
        &vote.mask_aft,
        cv.c_bef,
        cv.c_aft,
        cv.d_aft,
        &vars.distill,
    )?;
    let repr_rev = distill::distill_difference(
        tape,
        x_aft,
        x_bef,
        &vote.mask_aft,
        &vote.mask_bef,
        cv.c_aft,
        cv.c_bef,
        cv.d_bef,
        &vars.distill,
    )?;

    Ok(PairForward {
        x_bef,
        x_aft,
        rf_bef,
        rf_aft,
        cv,
        repr_fwd,
        repr_rev,
        vote,
    })
}

fn compute_vote<F: Elem>(
    feats_b: &Array2<F>,
    feats_a: &Array2<F>,
    grid: (usize, usize),
    config: &ModelConfig,
    ablation: Ablation,
    ablation_seed: u64,
) -> Result<VoteResult> {
    let n = grid.0 * grid.1;
    match ablation {
        Ablation::NoMask => {
            let sim = shiftvote::pairwise_similarity(feats_b, feats_a, config.tau)?;
            let (vote_map, dominant) = shiftvote::vote(&sim, grid)?;
            Ok(VoteResult {
                vote_map,
                dominant_shift: dominant,
                mask_bef: vec![1; n],
                mask_aft: vec![1; n],
                kept_pairs: Vec::new(),
            })
        }
        Ablation::RandomMask => {
            let sim = shiftvote::pairwise_similarity(feats_b, feats_a, config.tau)?;
            let (vote_map, dominant) = shiftvote::vote(&sim, grid)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ablation_seed);
            let mask_bef: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            let mask_aft: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            Ok(VoteResult {
                vote_map,
                dominant_shift: dominant,
                mask_bef,
                mask_aft,
                kept_pairs: Vec::new(),
            })
        }
        Ablation::RandomDirectionWindow => {
            let sim = shiftvote::pairwise_similarity(feats_b, feats_a, config.tau)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ablation_seed);
            let dominant = (
                rng.gen_range(-config.max_shift..=config.max_shift),
                rng.gen_range(-config.max_shift..=config.max_shift),
            );
            shiftvote::build_masks(&sim, dominant, config.radius, config.theta, grid)
        }
        Ablation::NoDirectionWindow => {
            let sim = shiftvote::pairwise_similarity(feats_b, feats_a, config.tau)?;
            let (_, dominant) = shiftvote::vote(&sim, grid)?;
            shiftvote::build_masks(&sim, dominant, NO_WINDOW, config.theta, grid)
        }
        Ablation::None | Ablation::NoHcmOcc => shiftvote::estimate(
            feats_b,
            feats_a,
            config.tau,
            config.radius,
            config.theta,
            grid,
        ),
    }
}

/// Scalar loss terms for one training step (all tape scalars).
pub struct StepLosses {
    pub l_cap: Var,
    pub l_glo: Var,
    pub l_reg: Var,
    pub l_hsic: Var,
    pub l_align: Var,
    pub total: Var,
    /// Count of degenerate (zero-norm) direction vectors encountered.
    pub degenerate_directions: usize,
}

/// Indices driving stochastic choices for one step; sampled by the
/// trainer so the model stays a pure function of its inputs.
pub struct StepPlan {
    /// Caption variant per pair.
    pub caption_variant: Vec<usize>,
    /// Negative-pair index (within the batch) per pair.
    pub negative: Vec<usize>,
    /// Seed stream for ablation randomness.
    pub ablation_seed: u64,
}

/// Compose the full objective over a batch of pairs.
#[allow(clippy::too_many_arguments)]
pub fn step_loss<F: Elem>(
    tape: &mut Tape<F>,
    vars: &ModelVars,
    vocab: &Vocab,
    pairs: &[PairInput<F>],
    plan: &StepPlan,
    config: &ModelConfig,
    ablation: Ablation,
    lambda: f64,
) -> Result<StepLosses> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::BatchSize(format!(
            "training step needs at least 2 pairs, got {b}"
        )));
    }
    if plan.caption_variant.len() != b || plan.negative.len() != b {
        return Err(Error::Dimension("step plan does not cover the batch".into()));
    }

    let mut forwards = Vec::with_capacity(b);
    for (i, pair) in pairs.iter().enumerate() {
        let pf = forward_pair(
            tape,
            vars,
            pair,
            config,
            ablation,
            plan.ablation_seed.wrapping_add(i as u64),
            None,
        )?;
        forwards.push(pf);
    }

    // Teacher-forced decoding of the selected forward/reverse captions.
    let mut sequences = Vec::with_capacity(2 * b);
    let mut logits = Vec::with_capacity(2 * b);
    let mut deltas: Vec<(Var, Var)> = Vec::with_capacity(b);
    for (i, pair) in pairs.iter().enumerate() {
        let k = plan.caption_variant[i] % pair.record.captions_forward.len();
        let fwd_tokens = &pair.record.captions_forward[k];
        let rev_tokens = &pair.record.captions_reverse[k];
        let ids_f = vocab.encode(fwd_tokens);
        let ids_r = vocab.encode(rev_tokens);
        for ids in [&ids_f, &ids_r] {
            if ids.len() > config.max_caption_len {
                return Err(Error::Length(format!(
                    "caption of {} tokens exceeds the limit {}",
                    ids.len(),
                    config.max_caption_len
                )));
            }
        }
        let dec_f = captioner::decode_sequence(
            tape,
            forwards[i].repr_fwd.d,
            &ids_f,
            &vars.dec,
            &vars.out,
            false,
        )?;
        let dec_r = captioner::decode_sequence(
            tape,
            forwards[i].repr_rev.d,
            &ids_r,
            &vars.dec,
            &vars.out,
            false,
        )?;
        let (delta_d, delta_t) = hcm_occ::directional_vectors(
            tape,
            forwards[i].repr_fwd.d,
            forwards[i].repr_rev.d,
            dec_f.hidden_post_self,
            dec_r.hidden_post_self,
        )?;
        deltas.push((delta_d, delta_t));
        sequences.push(ids_f);
        sequences.push(ids_r);
        logits.push(dec_f.logits);
        logits.push(dec_r.logits);
    }
    let batch = CaptionBatch::new(sequences)?;
    let l_cap = captioner::caption_loss(tape, &logits, &batch)?;

    // Batched context losses over the per-pair CLS projections.
    let stack = |tape: &mut Tape<F>, parts: Vec<Var>| -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.concat_rows(acc, p);
        }
        acc
    };
    let g_bef = stack(tape, forwards.iter().map(|f| f.cv.g_bef).collect());
    let g_aft = stack(tape, forwards.iter().map(|f| f.cv.g_aft).collect());
    let c_bef = stack(tape, forwards.iter().map(|f| f.cv.c_bef).collect());
    let c_aft = stack(tape, forwards.iter().map(|f| f.cv.c_aft).collect());
    let d_bef = stack(tape, forwards.iter().map(|f| f.cv.d_bef).collect());
    let d_aft = stack(tape, forwards.iter().map(|f| f.cv.d_aft).collect());
    let ctx = distill::context_loss(
        tape,
        g_bef,
        g_aft,
        c_bef,
        c_aft,
        d_bef,
        d_aft,
        config.tau,
        config.bandwidth,
    )?;

    // Orientation alignment with one in-batch negative per pair.
    let mut degenerate = 0usize;
    let l_align = if ablation == Ablation::NoHcmOcc {
        tape.constant(Array2::zeros((1, 1)))
    } else {
        let mut acc: Option<Var> = None;
        for i in 0..b {
            let j = plan.negative[i];
            if j == i || j >= b {
                return Err(Error::Config(format!(
                    "negative index {j} invalid for pair {i} in a batch of {b}"
                )));
            }
            let dv = DirectionalVectors {
                delta_d: deltas[i].0,
                delta_t: deltas[i].1,
                neg_d: vec![deltas[j].0],
                neg_t: vec![deltas[j].1],
            };
            let out = hcm_occ::alignment_loss(tape, &dv, config.gamma)?;
            degenerate += usize::from(out.degenerate);
            acc = Some(match acc {
                Some(a) => tape.add(a, out.loss),
                None => out.loss,
            });
        }
        let sum = acc.expect("nonempty batch");
        tape.scale(sum, F::from_f64(1.0 / b as f64))
    };

    let aux = tape.add(ctx.l_con, l_align);
    let weighted = tape.scale(aux, F::from_f64(lambda));
    let total = tape.add(l_cap, weighted);

    Ok(StepLosses {
        l_cap,
        l_glo: ctx.l_glo,
        l_reg: ctx.l_reg,
        l_hsic: ctx.l_hsic,
        l_align,
        total,
        degenerate_directions: degenerate,
    })
}

/// Frozen-parameter forward pass for one pair; returns the tape so
/// callers can read any intermediate value.
pub fn run_frozen<F: Elem>(
    model: &Model<F>,
    input: &PairInput<F>,
    ablation: Ablation,
) -> Result<(Tape<F>, PairForward)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, &model.params, false);
    let vars = bind_model(&mut binder, &model.config);
    drop(binder);
    let pf = forward_pair(&mut tape, &vars, input, &model.config, ablation, 0, None)?;
    Ok((tape, pf))
}

/// Greedy forward-direction caption for one pair.
pub fn generate_caption<F: Elem>(
    model: &Model<F>,
    input: &PairInput<F>,
    ablation: Ablation,
) -> Result<Vec<String>> {
    let (tape, pf) = run_frozen(model, input, ablation)?;
    let d_repr = tape.value(pf.repr_fwd.d).clone();
    let ids = captioner::greedy_decode(
        &model.params,
        &d_repr,
        model.config.heads,
        model.config.max_caption_len,
    )?;
    Ok(model.vocab.decode(&ids))
}

/// Head-averaged cross-attention weights of the common-region MHCA,
/// recomputed from the Z streams (queries from `z_from`, keys from
/// `z_to`).
pub fn mhca_attention<F: Elem>(
    params: &ParamSet<F>,
    z_from: &Array2<F>,
    z_to: &Array2<F>,
    heads: usize,
) -> Array2<f64> {
    let d = z_from.ncols();
    let head_dim = d / heads;
    let wq = params.get("distill.mhca.q.w");
    let bq = params.get("distill.mhca.q.b");
    let wk = params.get("distill.mhca.k.w");
    let bk = params.get("distill.mhca.k.b");
    let q = z_from.dot(wq) + bq;
    let k = z_to.dot(wk) + bk;
    let mut acc = Array2::<f64>::zeros((z_from.nrows(), z_to.nrows()));
    for h in 0..heads {
        let qs = q.slice(ndarray::s![.., h * head_dim..(h + 1) * head_dim]);
        let ks = k.slice(ndarray::s![.., h * head_dim..(h + 1) * head_dim]);
        let logits = qs.dot(&ks.t()).mapv(|x| x / F::from_f64((head_dim as f64).sqrt()));
        let sm = softmax_of(&logits);
        acc += &sm.mapv(|x| x.as_f64());
    }
    acc / heads as f64
}
