//! Cross-modal orientation consistency: directional vectors from the
//! forward/reverse change representations and caption encodings, aligned
//! with a bidirectional margin ranking loss over in-batch negatives.

use crate::error::{Error, Result};
use crate::tape::{Elem, Tape, Var};

/// Margin for the ranking loss.
pub const DEFAULT_GAMMA: f64 = 0.3;

/// Visual and textual direction vectors plus their sampled negatives
/// (one per modality per step, drawn from other pairs in the batch).
#[derive(Debug, Clone)]
pub struct DirectionalVectors {
    pub delta_d: Var,
    pub delta_t: Var,
    pub neg_d: Vec<Var>,
    pub neg_t: Vec<Var>,
}

/// Mean-pooled forward-minus-reverse vectors for both modalities.
///
/// The text sequences may have different lengths, so the difference is
/// taken between the per-sequence means (identical to the mean of the
/// difference when lengths agree).
pub fn directional_vectors<F: Elem>(
    tape: &mut Tape<F>,
    d_fwd: Var,
    d_rev: Var,
    t_fwd: Var,
    t_rev: Var,
) -> Result<(Var, Var)> {
    for v in [d_fwd, d_rev, t_fwd, t_rev] {
        if tape.shape(v).0 == 0 {
            return Err(Error::Dimension("empty sequence has no direction".into()));
        }
    }
    if tape.shape(d_fwd) != tape.shape(d_rev) {
        return Err(Error::Dimension(format!(
            "visual sequences differ: {:?} vs {:?}",
            tape.shape(d_fwd),
            tape.shape(d_rev)
        )));
    }
    let md_f = tape.mean_rows(d_fwd);
    let md_r = tape.mean_rows(d_rev);
    let delta_d = tape.sub(md_f, md_r);
    let mt_f = tape.mean_rows(t_fwd);
    let mt_r = tape.mean_rows(t_rev);
    let delta_t = tape.sub(mt_f, mt_r);
    Ok((delta_d, delta_t))
}

/// Cosine similarity of two 1 x d vectors. A (near-)zero-norm vector is
/// treated as cosine 0 and reported through the flag.
pub fn cosine_guarded<F: Elem>(tape: &mut Tape<F>, u: Var, v: Var) -> (Var, bool) {
    let norm = |tape: &Tape<F>, x: Var| -> f64 {
        tape.value(x).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    };
    if norm(tape, u) < 1e-12 || norm(tape, v) < 1e-12 {
        let zero = tape.constant(ndarray::Array2::zeros((1, 1)));
        return (zero, true);
    }
    let un = tape.normalize_rows(u);
    let vn = tape.normalize_rows(v);
    let vt = tape.transpose(vn);
    (tape.matmul(un, vt), false)
}

/// Outcome of the alignment loss: the scalar plus a flag raised when any
/// degenerate (zero-norm) direction vector was encountered.
pub struct AlignmentLoss {
    pub loss: Var,
    pub degenerate: bool,
}

/// Bidirectional margin ranking loss
/// `1/2 [max(0, g - cos(t,d) + cos(t,d-)) + max(0, g - cos(d,t) + cos(d,t-))]`
/// averaged over the provided negatives.
pub fn alignment_loss<F: Elem>(
    tape: &mut Tape<F>,
    dv: &DirectionalVectors,
    gamma: f64,
) -> Result<AlignmentLoss> {
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if dv.neg_d.is_empty() || dv.neg_t.is_empty() || dv.neg_d.len() != dv.neg_t.len() {
        return Err(Error::Config(
            "alignment loss needs matching nonempty negative lists".into(),
        ));
    }
    let mut degenerate = false;
    let (pos, warn) = cosine_guarded(tape, dv.delta_t, dv.delta_d);
    degenerate |= warn;

    let mut total: Option<Var> = None;
    let g = F::from_f64(gamma);
    for (&nd, &nt) in dv.neg_d.iter().zip(&dv.neg_t) {
        let (cos_t_negd, w1) = cosine_guarded(tape, dv.delta_t, nd);
        let (cos_d_negt, w2) = cosine_guarded(tape, dv.delta_d, nt);
        degenerate |= w1 | w2;
        let hinge = |tape: &mut Tape<F>, neg_cos: Var| -> Var {
            let slack = tape.sub(neg_cos, pos);
            let shifted = tape.add_scalar(slack, g);
            tape.relu(shifted)
        };
        let h1 = hinge(tape, cos_t_negd);
        let h2 = hinge(tape, cos_d_negt);
        let pair = tape.add(h1, h2);
        let half = tape.scale(pair, F::from_f64(0.5));
        total = Some(match total {
            Some(acc) => tape.add(acc, half),
            None => half,
        });
    }
    let sum = total.expect("at least one negative");
    let loss = tape.scale(sum, F::from_f64(1.0 / dv.neg_d.len() as f64));
    Ok(AlignmentLoss { loss, degenerate })
}
