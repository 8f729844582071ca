//! Scene change distillation: region context encoders, hierarchical
//! contrastive consistency (global + common InfoNCE), HSIC independence
//! regularization on the difference contexts, and context-guided
//! residual distillation into the fused change representation.

use crate::dalt::RegionFeatures;
use crate::error::{Error, Result};
use crate::nn::{
    bind_attention, bind_linear, init_attention, init_linear, linear, multi_head_attention,
    AttentionVars, Binder, LinearVars, ParamSet,
};
use crate::tape::{Elem, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Gaussian kernel bandwidth policy for the HSIC loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pairwise squared distance, recomputed per batch and treated
    /// as a constant by the gradient.
    Median,
    #[serde(untagged)]
    Fixed(f64),
}

/// Region context vectors for one image pair (all 1 x d).
#[derive(Debug, Clone, Copy)]
pub struct ContextVectors {
    pub g_bef: Var,
    pub g_aft: Var,
    pub c_bef: Var,
    pub c_aft: Var,
    pub d_bef: Var,
    pub d_aft: Var,
}

/// Fused change representation for one caption direction, with the
/// intermediates the distillation produces along the way.
#[derive(Debug, Clone, Copy)]
pub struct DifferenceRepr {
    /// N x d fused change representation.
    pub d: Var,
    pub z_src: Var,
    pub z_tgt: Var,
    /// Cross-attended common features (source reconstructed from target
    /// and vice versa).
    pub xt_src: Var,
    pub xt_tgt: Var,
    pub d_local_tgt: Var,
    pub d_local_src: Var,
    /// N x d with every row equal to the direction's difference context.
    pub d_global: Var,
}

pub const PARAM_PREFIX: &str = "distill";

pub fn init_params<F: Elem, R: Rng>(params: &mut ParamSet<F>, d: usize, rng: &mut R) {
    init_linear(params, &format!("{PARAM_PREFIX}.ge"), d, d, rng);
    init_linear(params, &format!("{PARAM_PREFIX}.ce"), d, d, rng);
    init_linear(params, &format!("{PARAM_PREFIX}.de_bef"), d, d, rng);
    init_linear(params, &format!("{PARAM_PREFIX}.de_aft"), d, d, rng);
    init_linear(params, &format!("{PARAM_PREFIX}.z"), 2 * d, d, rng);
    init_attention(params, &format!("{PARAM_PREFIX}.mhca"), d, rng);
    init_linear(params, &format!("{PARAM_PREFIX}.phi"), d, d, rng);
    init_linear(params, &format!("{PARAM_PREFIX}.fuse"), 3 * d, d, rng);
}

#[derive(Clone, Copy)]
pub struct DistillVars {
    pub ge: LinearVars,
    pub ce: LinearVars,
    pub de_bef: LinearVars,
    pub de_aft: LinearVars,
    pub z_proj: LinearVars,
    pub mhca: AttentionVars,
    pub phi: LinearVars,
    pub fuse: LinearVars,
}

pub fn bind<F: Elem>(binder: &mut Binder<F>, heads: usize) -> DistillVars {
    DistillVars {
        ge: bind_linear(binder, &format!("{PARAM_PREFIX}.ge")),
        ce: bind_linear(binder, &format!("{PARAM_PREFIX}.ce")),
        de_bef: bind_linear(binder, &format!("{PARAM_PREFIX}.de_bef")),
        de_aft: bind_linear(binder, &format!("{PARAM_PREFIX}.de_aft")),
        z_proj: bind_linear(binder, &format!("{PARAM_PREFIX}.z")),
        mhca: bind_attention(binder, &format!("{PARAM_PREFIX}.mhca"), heads),
        phi: bind_linear(binder, &format!("{PARAM_PREFIX}.phi")),
        fuse: bind_linear(binder, &format!("{PARAM_PREFIX}.fuse")),
    }
}

/// Encode the region CLS tokens into context vectors. The global and
/// common encoders are shared across images; the difference encoders are
/// image-specific.
pub fn context_encode<F: Elem>(
    tape: &mut Tape<F>,
    rf_bef: &RegionFeatures,
    rf_aft: &RegionFeatures,
    vars: &DistillVars,
) -> ContextVectors {
    ContextVectors {
        g_bef: linear(tape, rf_bef.cls_glo, &vars.ge),
        g_aft: linear(tape, rf_aft.cls_glo, &vars.ge),
        c_bef: linear(tape, rf_bef.cls_com, &vars.ce),
        c_aft: linear(tape, rf_aft.cls_com, &vars.ce),
        d_bef: linear(tape, rf_bef.cls_diff, &vars.de_bef),
        d_aft: linear(tape, rf_aft.cls_diff, &vars.de_aft),
    }
}

fn check_rows_nonzero<F: Elem>(tape: &Tape<F>, v: Var) -> Result<()> {
    for (i, row) in tape.value(v).rows().into_iter().enumerate() {
        let norm: f64 = row.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        if norm.sqrt() < 1e-12 {
            return Err(Error::Normalization { row: i });
        }
    }
    Ok(())
}

/// InfoNCE over row-aligned positives: `-1/B sum_i log softmax_j(a_i.b_j/tau)[i]`
/// with rows l2-normalized first.
pub fn info_nce<F: Elem>(tape: &mut Tape<F>, a: Var, b: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (ba, da) = tape.shape(a);
    let (bb, db) = tape.shape(b);
    if (ba, da) != (bb, db) {
        return Err(Error::Dimension(format!(
            "batch shapes differ: {:?} vs {:?}",
            (ba, da),
            (bb, db)
        )));
    }
    if ba == 0 {
        return Err(Error::BatchSize("empty batch".into()));
    }
    check_rows_nonzero(tape, a)?;
    check_rows_nonzero(tape, b)?;
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let bt = tape.transpose(bn);
    let sims = tape.matmul(an, bt);
    let logits = tape.scale(sims, F::from_f64(1.0 / tau));
    let lsm = tape.log_softmax_rows(logits);
    let eye = Array2::from_shape_fn((ba, ba), |(i, j)| {
        if i == j {
            F::one()
        } else {
            F::zero()
        }
    });
    let diag = tape.mul_const(lsm, &eye);
    let total = tape.sum_all(diag);
    Ok(tape.scale(total, F::from_f64(-1.0 / ba as f64)))
}

/// Squared pairwise distances of l2-normalized rows, as a tape node:
/// d2_ij = 2 - 2 cos_ij.
fn normalized_sq_dists<F: Elem>(tape: &mut Tape<F>, x: Var) -> Var {
    let xn = tape.normalize_rows(x);
    let xt = tape.transpose(xn);
    let gram = tape.matmul(xn, xt);
    let scaled = tape.scale(gram, F::from_f64(-2.0));
    tape.add_scalar(scaled, F::from_f64(2.0))
}

fn median_off_diagonal<F: Elem>(tape: &Tape<F>, d2: Var) -> f64 {
    let m = tape.value(d2);
    let b = m.nrows();
    let mut dists = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in (i + 1)..b {
            dists.push(m[[i, j]].as_f64().max(0.0));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

fn gaussian_kernel<F: Elem>(tape: &mut Tape<F>, x: Var, bandwidth: Bandwidth) -> Result<Var> {
    let d2 = normalized_sq_dists(tape, x);
    let denom = match bandwidth {
        Bandwidth::Fixed(sigma) => {
            if sigma <= 0.0 {
                return Err(Error::Config(format!(
                    "bandwidth must be positive, got {sigma}"
                )));
            }
            2.0 * sigma * sigma
        }
        Bandwidth::Median => {
            // Constant to the gradient: recomputed each forward pass from
            // detached values.
            let med = median_off_diagonal(tape, d2);
            if med < 1e-12 {
                1.0
            } else {
                med
            }
        }
    };
    let scaled = tape.scale(d2, F::from_f64(-1.0 / denom));
    Ok(tape.exp(scaled))
}

/// Hilbert-Schmidt independence criterion between two batches with
/// Gaussian kernels: `Tr(K H L H) / (B - 1)^2`.
pub fn hsic_loss<F: Elem>(
    tape: &mut Tape<F>,
    a: Var,
    b: Var,
    bandwidth: Bandwidth,
) -> Result<Var> {
    let (ba, _) = tape.shape(a);
    let (bb, _) = tape.shape(b);
    if ba != bb {
        return Err(Error::Dimension(format!(
            "batch sizes differ: {ba} vs {bb}"
        )));
    }
    if ba < 2 {
        return Err(Error::BatchSize(format!(
            "HSIC needs a batch of at least 2, got {ba}"
        )));
    }
    check_rows_nonzero(tape, a)?;
    check_rows_nonzero(tape, b)?;
    let k = gaussian_kernel(tape, a, bandwidth)?;
    let l = gaussian_kernel(tape, b, bandwidth)?;
    let h = Array2::from_shape_fn((ba, ba), |(i, j)| {
        let center = if i == j { 1.0 } else { 0.0 };
        F::from_f64(center - 1.0 / ba as f64)
    });
    let hv = tape.constant(h);
    let hl = tape.matmul(hv, l);
    let hlh = tape.matmul(hl, hv);
    // Tr(K M) = sum(K . M^T); H L H is symmetric, so the transpose drops.
    let prod = tape.mul(k, hlh);
    let tr = tape.sum_all(prod);
    Ok(tape.scale(tr, F::from_f64(1.0 / ((ba - 1) * (ba - 1)) as f64)))
}

/// The three context objectives and their sum (unit weights).
pub struct ContextLoss {
    pub l_glo: Var,
    pub l_reg: Var,
    pub l_hsic: Var,
    pub l_con: Var,
}

/// Batched context loss. Rows of each matrix are per-pair context vectors.
#[allow(clippy::too_many_arguments)]
pub fn context_loss<F: Elem>(
    tape: &mut Tape<F>,
    g_bef: Var,
    g_aft: Var,
    c_bef: Var,
    c_aft: Var,
    d_bef: Var,
    d_aft: Var,
    tau: f64,
    bandwidth: Bandwidth,
) -> Result<ContextLoss> {
    let l_glo = info_nce(tape, g_bef, g_aft, tau)?;
    let l_reg = info_nce(tape, c_bef, c_aft, tau)?;
    let l_hsic = hsic_loss(tape, d_bef, d_aft, bandwidth)?;
    let partial = tape.add(l_glo, l_reg);
    let l_con = tape.add(partial, l_hsic);
    Ok(ContextLoss {
        l_glo,
        l_reg,
        l_hsic,
        l_con,
    })
}

fn mask_matrix<F: Elem>(mask: &[u8], d: usize) -> Array2<F> {
    Array2::from_shape_fn((mask.len(), d), |(i, _)| {
        if mask[i] == 1 {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Distill the change representation for one caption direction.
///
/// `src` is the direction's source image and `tgt` its target (bef/aft
/// for the forward direction, swapped for the reverse). Masked common
/// features plus the broadcast common context are projected to Z, the
/// two Z streams cross-attend symmetrically, residuals against the raw
/// features pass through the shared nonlinear projection, and the global
/// difference context (target side) is fused with both local residual
/// streams into the final N x d representation.
#[allow(clippy::too_many_arguments)]
pub fn distill_difference<F: Elem>(
    tape: &mut Tape<F>,
    x_src: Var,
    x_tgt: Var,
    mask_src: &[u8],
    mask_tgt: &[u8],
    c_src: Var,
    c_tgt: Var,
    d_tgt: Var,
    vars: &DistillVars,
) -> Result<DifferenceRepr> {
    let (n, d) = tape.shape(x_src);
    if tape.shape(x_tgt) != (n, d) {
        return Err(Error::Dimension(format!(
            "source features {:?} vs target features {:?}",
            (n, d),
            tape.shape(x_tgt)
        )));
    }
    if mask_src.len() != n || mask_tgt.len() != n {
        return Err(Error::Dimension(format!(
            "masks of lengths {} and {} do not cover {n} patches",
            mask_src.len(),
            mask_tgt.len()
        )));
    }

    let build_z = |tape: &mut Tape<F>, x: Var, mask: &[u8], ctx: Var| -> Var {
        let masked = tape.mul_const(x, &mask_matrix(mask, d));
        let ctx_rows = tape.broadcast_row(ctx, n);
        let cat = tape.concat_cols(masked, ctx_rows);
        linear(tape, cat, &vars.z_proj)
    };
    let z_src = build_z(tape, x_src, mask_src, c_src);
    let z_tgt = build_z(tape, x_tgt, mask_tgt, c_tgt);

    let xt_src = multi_head_attention(tape, z_src, z_tgt, &vars.mhca, None, None);
    let xt_tgt = multi_head_attention(tape, z_tgt, z_src, &vars.mhca, None, None);

    let res_tgt = tape.sub(x_tgt, xt_tgt);
    let res_src = tape.sub(x_src, xt_src);
    let phi = |tape: &mut Tape<F>, x: Var| -> Var {
        let h = linear(tape, x, &vars.phi);
        tape.relu(h)
    };
    let d_local_tgt = phi(tape, res_tgt);
    let d_local_src = phi(tape, res_src);

    let d_global = tape.broadcast_row(d_tgt, n);
    let cat1 = tape.concat_cols(d_global, d_local_tgt);
    let cat = tape.concat_cols(cat1, d_local_src);
    let fused = linear(tape, cat, &vars.fuse);
    let out = tape.relu(fused);

    if tape.value(out).iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::Numeric(
            "difference representation contains non-finite values".into(),
        ));
    }
    Ok(DifferenceRepr {
        d: out,
        z_src,
        z_tgt,
        xt_src,
        xt_tgt,
        d_local_tgt,
        d_local_src,
        d_global,
    })
}
