//! Region-aware encoding: decompose patches into common/different regions
//! by the overlap mask, attach a learnable CLS token per region, and
//! self-attend each region sequence with a shared encoder layer.

use crate::error::{Error, Result};
use crate::nn::{
    bind_attention, bind_feed_forward, bind_layer_norm, feed_forward, init_attention,
    init_feed_forward, init_layer_norm, layer_norm, multi_head_attention, AttentionVars, Binder,
    FeedForwardVars, LayerNormVars, ParamSet,
};
use crate::tape::{Elem, Tape, Var};
use ndarray::Array2;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Glo,
    Com,
    Diff,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Glo, Region::Com, Region::Diff];

    pub fn name(self) -> &'static str {
        match self {
            Region::Glo => "glo",
            Region::Com => "com",
            Region::Diff => "diff",
        }
    }
}

/// Exact partition of a feature grid into common and different regions.
#[derive(Debug, Clone)]
pub struct RegionDecomposition<F: Elem> {
    /// Features with different-region rows zeroed.
    pub x_com: Array2<F>,
    /// Features with common-region rows zeroed.
    pub x_diff: Array2<F>,
    /// All patch indices, in order.
    pub index_glo: Vec<usize>,
    /// Ordered indices with mask = 1.
    pub index_com: Vec<usize>,
    /// Ordered indices with mask = 0.
    pub index_diff: Vec<usize>,
    pub mask: Vec<u8>,
}

impl<F: Elem> RegionDecomposition<F> {
    pub fn indices(&self, region: Region) -> &[usize] {
        match region {
            Region::Glo => &self.index_glo,
            Region::Com => &self.index_com,
            Region::Diff => &self.index_diff,
        }
    }
}

/// Split features by a binary overlap mask. Pure; the mask stays constant
/// to any downstream learning.
pub fn decompose<F: Elem>(x: &Array2<F>, mask: &[u8]) -> Result<RegionDecomposition<F>> {
    let n = x.nrows();
    if mask.len() != n {
        return Err(Error::Dimension(format!(
            "mask length {} does not match {} patches",
            mask.len(),
            n
        )));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Config("mask entries must be 0 or 1".into()));
    }
    let mut x_com = x.clone();
    let mut x_diff = x.clone();
    let mut index_com = Vec::new();
    let mut index_diff = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            index_com.push(i);
            x_diff.row_mut(i).fill(F::zero());
        } else {
            index_diff.push(i);
            x_com.row_mut(i).fill(F::zero());
        }
    }
    Ok(RegionDecomposition {
        x_com,
        x_diff,
        index_glo: (0..n).collect(),
        index_com,
        index_diff,
        mask: mask.to_vec(),
    })
}

/// Context-enhanced patch features plus one CLS summary per region.
#[derive(Debug, Clone, Copy)]
pub struct RegionFeatures {
    pub patch_features: Var,
    pub cls_glo: Var,
    pub cls_com: Var,
    pub cls_diff: Var,
}

impl RegionFeatures {
    pub fn cls(&self, region: Region) -> Var {
        match region {
            Region::Glo => self.cls_glo,
            Region::Com => self.cls_com,
            Region::Diff => self.cls_diff,
        }
    }
}

pub const PARAM_PREFIX: &str = "dalt";

pub fn init_params<F: Elem, R: Rng>(
    params: &mut ParamSet<F>,
    d: usize,
    ffn_hidden: usize,
    rng: &mut R,
) {
    for region in Region::ALL {
        let cls = Array2::from_shape_fn((1, d), |_| {
            F::from_f64(F::std_normal(rng).as_f64() * 0.02)
        });
        params.insert(format!("{PARAM_PREFIX}.cls.{}", region.name()), cls);
    }
    init_attention(params, &format!("{PARAM_PREFIX}.enc.attn"), d, rng);
    init_layer_norm(params, &format!("{PARAM_PREFIX}.enc.ln1"), d);
    init_feed_forward(params, &format!("{PARAM_PREFIX}.enc"), d, ffn_hidden, rng);
    init_layer_norm(params, &format!("{PARAM_PREFIX}.enc.ln2"), d);
}

#[derive(Clone, Copy)]
pub struct DaltVars {
    pub cls: [Var; 3],
    pub attn: AttentionVars,
    pub ln1: LayerNormVars,
    pub ffn: FeedForwardVars,
    pub ln2: LayerNormVars,
}

pub fn bind<F: Elem>(binder: &mut Binder<F>, heads: usize) -> DaltVars {
    let cls = [
        binder.bind(&format!("{PARAM_PREFIX}.cls.glo")),
        binder.bind(&format!("{PARAM_PREFIX}.cls.com")),
        binder.bind(&format!("{PARAM_PREFIX}.cls.diff")),
    ];
    DaltVars {
        cls,
        attn: bind_attention(binder, &format!("{PARAM_PREFIX}.enc.attn"), heads),
        ln1: bind_layer_norm(binder, &format!("{PARAM_PREFIX}.enc.ln1")),
        ffn: bind_feed_forward(binder, &format!("{PARAM_PREFIX}.enc")),
        ln2: bind_layer_norm(binder, &format!("{PARAM_PREFIX}.enc.ln2")),
    }
}

fn encoder_layer<F: Elem>(tape: &mut Tape<F>, x: Var, vars: &DaltVars) -> Var {
    let attended = multi_head_attention(tape, x, x, &vars.attn, None, None);
    let res1 = tape.add(x, attended);
    let h1 = layer_norm(tape, res1, &vars.ln1);
    let ff = feed_forward(tape, h1, &vars.ffn);
    let res2 = tape.add(h1, ff);
    layer_norm(tape, res2, &vars.ln2)
}

/// Run the shared encoder over the three region sequences.
///
/// Patch outputs come from the global pass (which covers every index);
/// the common/different passes contribute their CLS summaries. An empty
/// region degenerates to a CLS-only sequence, which is still encoded.
pub fn encode_regions<F: Elem>(
    tape: &mut Tape<F>,
    x: Var,
    dec: &RegionDecomposition<F>,
    vars: &DaltVars,
) -> Result<RegionFeatures> {
    let (n, _) = tape.shape(x);
    if dec.mask.len() != n {
        return Err(Error::Dimension(format!(
            "decomposition covers {} patches but features hold {}",
            dec.mask.len(),
            n
        )));
    }
    let mut cls_out = [None; 3];
    let mut patches = None;
    for (slot, region) in Region::ALL.iter().enumerate() {
        let idx = dec.indices(*region);
        let seq = if idx.is_empty() {
            vars.cls[slot]
        } else {
            let gathered = tape.gather_rows(x, idx);
            tape.concat_rows(vars.cls[slot], gathered)
        };
        let encoded = encoder_layer(tape, seq, vars);
        cls_out[slot] = Some(tape.slice_rows(encoded, 0, 1));
        if *region == Region::Glo {
            patches = Some(tape.slice_rows(encoded, 1, n));
        }
    }
    let out = RegionFeatures {
        patch_features: patches.expect("global pass always runs"),
        cls_glo: cls_out[0].unwrap(),
        cls_com: cls_out[1].unwrap(),
        cls_diff: cls_out[2].unwrap(),
    };
    if tape.value(out.patch_features).iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::Numeric("attention produced non-finite values".into()));
    }
    Ok(out)
}
