//! Caption decoding: vocabulary, a single-layer transformer decoder with
//! masked self-attention and cross-attention into the change
//! representation, teacher-forced NLL training, and greedy inference.

use crate::error::{Error, Result};
use crate::nn::{
    bind_attention, bind_feed_forward, bind_layer_norm, bind_linear, feed_forward,
    init_attention, init_feed_forward, init_layer_norm, init_linear, layer_norm, linear,
    multi_head_attention, sinusoidal_seq, AttentionVars, Binder, FeedForwardVars, LayerNormVars,
    LinearVars, ParamSet,
};
use crate::tape::{Elem, Tape, Var};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with dense ids and fixed special slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: IndexMap<String, usize>,
}

impl Vocab {
    /// Build from raw tokens: dedup, sort, specials in front.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let mut uniq: Vec<String> = tokens
            .into_iter()
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(uniq);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    /// Collect every caption token in a dataset.
    pub fn from_records(records: &[crate::scenegen::PairRecord]) -> Vocab {
        let mut tokens = Vec::new();
        for r in records {
            for cap in r.captions_forward.iter().chain(&r.captions_reverse) {
                tokens.extend(cap.iter().cloned());
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Wrap tokens in BOS/EOS ids.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    /// Drop specials and map ids back to tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.token_to_id
                .iter()
                .map(|(t, &i)| (t.clone(), serde_json::Value::from(i)))
                .collect(),
        )
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Vocab> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::Vocab("vocab JSON must be an object".into()))?;
        let mut pairs: Vec<(String, usize)> = map
            .iter()
            .map(|(t, v)| {
                v.as_u64()
                    .map(|i| (t.clone(), i as usize))
                    .ok_or_else(|| Error::Vocab(format!("non-integer id for token {t}")))
            })
            .collect::<Result<_>>()?;
        pairs.sort_by_key(|(_, i)| *i);
        if pairs
            .iter()
            .enumerate()
            .any(|(expect, (_, actual))| expect != *actual)
        {
            return Err(Error::Vocab("token ids are not dense".into()));
        }
        let id_to_token: Vec<String> = pairs.iter().map(|(t, _)| t.clone()).collect();
        for (slot, name) in SPECIALS.iter().enumerate() {
            if id_to_token.get(slot).map(String::as_str) != Some(*name) {
                return Err(Error::Vocab(format!(
                    "special token {name} missing from slot {slot}"
                )));
            }
        }
        Ok(Vocab {
            token_to_id: pairs.into_iter().collect(),
            id_to_token,
        })
    }
}

/// Teacher-forcing batch: rectangular ids padded with PAD, plus lengths.
#[derive(Debug, Clone)]
pub struct CaptionBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl CaptionBatch {
    pub fn new(sequences: Vec<Vec<usize>>) -> Result<CaptionBatch> {
        if sequences.is_empty() {
            return Err(Error::BatchSize("empty caption batch".into()));
        }
        let max_len = sequences.iter().map(Vec::len).max().unwrap();
        let mut token_ids = Vec::with_capacity(sequences.len());
        let mut lengths = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.first() != Some(&BOS) {
                return Err(Error::Vocab("sequence must start with BOS".into()));
            }
            if seq.iter().filter(|&&t| t == EOS).count() != 1 || seq.last() != Some(&EOS) {
                return Err(Error::Vocab(
                    "sequence must end with its single EOS; padding is added here".into(),
                ));
            }
            lengths.push(seq.len());
            let mut row = seq;
            row.resize(max_len, PAD);
            token_ids.push(row);
        }
        Ok(CaptionBatch {
            token_ids,
            lengths,
            max_len,
        })
    }

    pub fn pad_mask(&self) -> Vec<Vec<u8>> {
        self.token_ids
            .iter()
            .zip(&self.lengths)
            .map(|(row, &len)| {
                row.iter()
                    .enumerate()
                    .map(|(i, _)| u8::from(i < len))
                    .collect()
            })
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.len()
    }
}

pub const PARAM_PREFIX: &str = "dec";

pub fn init_params<F: Elem, R: Rng>(
    params: &mut ParamSet<F>,
    vocab_size: usize,
    d: usize,
    ffn_hidden: usize,
    rng: &mut R,
) {
    let emb = Array2::from_shape_fn((vocab_size, d), |_| {
        F::from_f64(F::std_normal(rng).as_f64() * 0.02)
    });
    params.insert(format!("{PARAM_PREFIX}.emb"), emb);
    init_attention(params, &format!("{PARAM_PREFIX}.self"), d, rng);
    init_layer_norm(params, &format!("{PARAM_PREFIX}.ln1"), d);
    init_attention(params, &format!("{PARAM_PREFIX}.cross"), d, rng);
    init_layer_norm(params, &format!("{PARAM_PREFIX}.ln2"), d);
    init_feed_forward(params, PARAM_PREFIX, d, ffn_hidden, rng);
    init_layer_norm(params, &format!("{PARAM_PREFIX}.ln3"), d);
    init_linear(params, &format!("{PARAM_PREFIX}.out"), d, vocab_size, rng);
}

#[derive(Clone, Copy)]
pub struct DecoderVars {
    pub emb: Var,
    pub self_attn: AttentionVars,
    pub ln1: LayerNormVars,
    pub cross_attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub ffn: FeedForwardVars,
    pub ln3: LayerNormVars,
}

pub fn bind<F: Elem>(binder: &mut Binder<F>, heads: usize) -> (DecoderVars, LinearVars) {
    let vars = DecoderVars {
        emb: binder.bind(&format!("{PARAM_PREFIX}.emb")),
        self_attn: bind_attention(binder, &format!("{PARAM_PREFIX}.self"), heads),
        ln1: bind_layer_norm(binder, &format!("{PARAM_PREFIX}.ln1")),
        cross_attn: bind_attention(binder, &format!("{PARAM_PREFIX}.cross"), heads),
        ln2: bind_layer_norm(binder, &format!("{PARAM_PREFIX}.ln2")),
        ffn: bind_feed_forward(binder, PARAM_PREFIX),
        ln3: bind_layer_norm(binder, &format!("{PARAM_PREFIX}.ln3")),
    };
    let out = bind_linear(binder, &format!("{PARAM_PREFIX}.out"));
    (vars, out)
}

fn causal_mask<F: Elem>(m: usize) -> Array2<F> {
    Array2::from_shape_fn((m, m), |(i, j)| {
        if j <= i {
            F::zero()
        } else {
            F::from_f64(-1e9)
        }
    })
}

/// Decoder forward for one sequence: logits over the vocabulary at every
/// position plus the post-self-attention hidden states used by the
/// orientation calibration.
pub struct DecodedSequence {
    /// m x u pre-softmax scores; position t is conditioned on tokens < t
    /// (it predicts token t+1).
    pub logits: Var,
    /// m x d hidden states after masked self-attention + layer norm.
    pub hidden_post_self: Var,
    /// Head-averaged cross-attention weights (m x N), recorded only when
    /// a probe is supplied.
    pub cross_attention: Option<Array2<f64>>,
}

pub fn decode_sequence<F: Elem>(
    tape: &mut Tape<F>,
    d_repr: Var,
    ids: &[usize],
    vars: &DecoderVars,
    out_proj: &LinearVars,
    probe_attention: bool,
) -> Result<DecodedSequence> {
    let vocab_size = tape.shape(vars.emb).0;
    let d = tape.shape(vars.emb).1;
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    if ids.is_empty() {
        return Err(Error::Dimension("cannot decode an empty sequence".into()));
    }
    let m = ids.len();
    let emb = tape.gather_rows(vars.emb, ids);
    let pe = sinusoidal_seq::<F>(m, d);
    let e = tape.add_const(emb, &pe);

    let mask = causal_mask::<F>(m);
    let sa = multi_head_attention(tape, e, e, &vars.self_attn, Some(&mask), None);
    let r1 = tape.add(e, sa);
    let e_hat = layer_norm(tape, r1, &vars.ln1);

    let mut probe = Vec::new();
    let ca = multi_head_attention(
        tape,
        e_hat,
        d_repr,
        &vars.cross_attn,
        None,
        probe_attention.then_some(&mut probe),
    );
    let r2 = tape.add(e_hat, ca);
    let h_tilde = layer_norm(tape, r2, &vars.ln2);

    let ff = feed_forward(tape, h_tilde, &vars.ffn);
    let r3 = tape.add(h_tilde, ff);
    let h_hat = layer_norm(tape, r3, &vars.ln3);

    let logits = linear(tape, h_hat, out_proj);
    Ok(DecodedSequence {
        logits,
        hidden_post_self: e_hat,
        cross_attention: probe.pop().map(|w| w.mapv(|x| x.as_f64())),
    })
}

/// Sum of per-token negative log-likelihoods over supervised positions
/// (targets are the next tokens; PAD targets contribute nothing), then
/// averaged across the batch.
pub fn caption_loss<F: Elem>(
    tape: &mut Tape<F>,
    logits_per_seq: &[Var],
    batch: &CaptionBatch,
) -> Result<Var> {
    if logits_per_seq.len() != batch.batch_size() {
        return Err(Error::Dimension(format!(
            "{} logit sets for a batch of {}",
            logits_per_seq.len(),
            batch.batch_size()
        )));
    }
    let mut total: Option<Var> = None;
    for (b, &logits) in logits_per_seq.iter().enumerate() {
        let (m, u) = tape.shape(logits);
        let row = &batch.token_ids[b];
        let len = batch.lengths[b];
        let mut target = Array2::zeros((m, u));
        let mut supervised = 0usize;
        for t in 0..m.min(row.len()).saturating_sub(1) {
            let next = row[t + 1];
            if t + 1 < len {
                target[[t, next]] = F::one();
                supervised += 1;
            }
        }
        if supervised == 0 {
            return Err(Error::EmptyTarget(format!(
                "sequence {b} has no supervised positions"
            )));
        }
        let lsm = tape.log_softmax_rows(logits);
        let picked = tape.mul_const(lsm, &target);
        let sum = tape.sum_all(picked);
        let nll = tape.scale(sum, -F::one());
        total = Some(match total {
            Some(acc) => tape.add(acc, nll),
            None => nll,
        });
    }
    let sum = total.expect("nonempty batch");
    Ok(tape.scale(sum, F::from_f64(1.0 / batch.batch_size() as f64)))
}

/// Greedy argmax decoding from BOS; stops at EOS or `max_len` tokens.
pub fn greedy_decode<F: Elem>(
    params: &ParamSet<F>,
    d_repr: &Array2<F>,
    heads: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    assert!(max_len >= 2, "max_len must allow BOS and EOS");
    let mut ids = vec![BOS];
    while ids.len() < max_len {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, params, false);
        let (vars, out) = bind(&mut binder, heads);
        drop(binder);
        let d_var = tape.constant(d_repr.clone());
        let decoded = decode_sequence(&mut tape, d_var, &ids, &vars, &out, false)?;
        let logits = tape.value(decoded.logits);
        let last = logits.row(logits.nrows() - 1);
        let mut best = 0;
        for (j, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = j;
            }
        }
        ids.push(best);
        if best == EOS {
            break;
        }
    }
    if *ids.last().unwrap() != EOS && ids.len() < max_len {
        ids.push(EOS);
    }
    Ok(ids)
}
