//! Training objectives: cross-entropy on the head, the adaptive-softmax loss
//! over the two mini-decoders, and the class-wise contrastive loss between
//! encoder and mini-decoder features of one branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Output width of the class projector.
pub const PROJECTION_DIM: usize = 128;

/// Mean `-ln softmax(logits)[label]` over labeled pixels.
pub fn ce_loss(g: &mut Graph, logits: Var, mask: &LabelMask) -> Result<Var> {
    check_dims(g, logits, mask)?;
    g.masked_cross_entropy(logits, mask.targets())
}

/// Mean `-ln max(p_M[label], p_D[label])` over labeled pixels. The max is not
/// renormalized; ties go to the magnitude branch.
pub fn adaptive_softmax_loss(g: &mut Graph, r_m: Var, r_d: Var, mask: &LabelMask) -> Result<Var> {
    check_dims(g, r_m, mask)?;
    check_dims(g, r_d, mask)?;
    g.adaptive_softmax(r_m, r_d, mask.targets())
}

fn check_dims(g: &Graph, logits: Var, mask: &LabelMask) -> Result<()> {
    let (h, w, c) = g.value(logits).dims3();
    if (h, w) != mask.dims() {
        return Err(Error::SpatialMismatch((h, w), mask.dims()));
    }
    if c != mask.class_count() as usize {
        return Err(Error::ChannelMismatch {
            expected: mask.class_count() as usize,
            actual: c,
        });
    }
    Ok(())
}

/// `LayerNorm -> Linear(C, 2C) -> ReLU -> Linear(2C, C) -> Linear(C, D_p)`
/// applied to per-class feature sums.
#[derive(Clone, Debug)]
pub struct ClassProjector {
    pub channels: usize,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    layers: [(ParamId, ParamId); 3],
}

impl ClassProjector {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let ln_gamma = store.add_const(format!("{name}.ln.gamma"), &[channels], 1.0);
        let ln_beta = store.add_const(format!("{name}.ln.beta"), &[channels], 0.0);
        let dims = [(channels, 2 * channels), (2 * channels, channels), (channels, PROJECTION_DIM)];
        let layers = std::array::from_fn(|l| {
            let (i, o) = dims[l];
            let w = store.add_normal(format!("{name}.fc{l}.w"), &[i, o], (1.0 / i as f64).sqrt(), rng);
            let b = store.add_const(format!("{name}.fc{l}.b"), &[o], 0.0);
            (w, b)
        });
        Self {
            channels,
            ln_gamma,
            ln_beta,
            layers,
        }
    }

    /// `[n, C]` rows to `[n, D_p]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rows: Var) -> Var {
        let gamma = g.param(store, self.ln_gamma);
        let beta = g.param(store, self.ln_beta);
        let mut x = g.layer_norm(rows, gamma, beta);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.matmul(x, wv, false);
            x = g.add_bias(y, bv);
            if i == 0 {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Per-pixel destination row for the classes in `keep` (one row per kept
/// class, in order); other pixels map to `None`.
pub fn class_rows(mask: &LabelMask, keep: &[u16]) -> Vec<Option<usize>> {
    let mut row_of = vec![None; mask.class_count() as usize + 1];
    for (r, &c) in keep.iter().enumerate() {
        row_of[c as usize] = Some(r);
    }
    mask.labels().iter().map(|&l| row_of[l as usize]).collect()
}

/// Classes with at least one pixel, ascending.
pub fn present_classes(mask: &LabelMask) -> Vec<u16> {
    mask.class_pixel_counts()
        .iter()
        .enumerate()
        .filter(|&(_, &n)| n > 0)
        .map(|(c, _)| c as u16 + 1)
        .collect()
}

/// Raw per-class sums of `x` (`[H', W', C]`) for the classes in `keep`, with
/// `mask` resized (nearest) to `x`'s spatial dims.
pub fn class_sums(g: &mut Graph, x: Var, mask: &LabelMask, keep: &[u16]) -> Var {
    let (h, w, _) = g.value(x).dims3();
    let small = mask.downsample_nearest(h, w);
    g.class_sum(x, class_rows(&small, keep), keep.len())
}

/// Projected class bank of `x`: the rows for every class present at `x`'s
/// resolution, and the class labels in row order.
pub fn class_features(
    g: &mut Graph,
    store: &ParamStore,
    projector: &ClassProjector,
    x: Var,
    mask: &LabelMask,
) -> (Var, Vec<u16>) {
    let (h, w, _) = g.value(x).dims3();
    let keep = present_classes(&mask.downsample_nearest(h, w));
    let sums = class_sums(g, x, mask, &keep);
    (projector.forward(g, store, sums), keep)
}

/// InfoNCE with identity targets between row-normalized `q` and `k`.
pub fn info_nce(g: &mut Graph, q: Var, k: Var) -> Var {
    let qn = g.l2_normalize_rows(q);
    let kn = g.l2_normalize_rows(k);
    let logits = g.matmul(qn, kn, true);
    g.identity_cross_entropy(logits)
}

/// Contrastive loss between encoder and decoder class banks of one branch,
/// over the classes present at both resolutions. Zero when fewer than two.
#[allow(clippy::too_many_arguments)]
pub fn class_contrastive_loss(
    g: &mut Graph,
    store: &ParamStore,
    proj_enc: &ClassProjector,
    proj_dec: &ClassProjector,
    f_enc: Var,
    f_dec: Var,
    mask: &LabelMask,
) -> Var {
    let present = |g: &Graph, x: Var| {
        let (h, w, _) = g.value(x).dims3();
        present_classes(&mask.downsample_nearest(h, w))
    };
    let enc_classes = present(g, f_enc);
    let dec_classes = present(g, f_dec);
    let keep: Vec<u16> = enc_classes.into_iter().filter(|c| dec_classes.contains(c)).collect();
    if keep.len() < 2 {
        return g.constant(Tensor::scalar(0.0));
    }
    let se = class_sums(g, f_enc, mask, &keep);
    let sd = class_sums(g, f_dec, mask, &keep);
    let q = proj_enc.forward(g, store, se);
    let k = proj_dec.forward(g, store, sd);
    info_nce(g, q, k)
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub asl: f64,
    /// Sum over both branches.
    pub ccl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 5] = ["step", "ce", "asl", "ccl", "total"];

    pub fn csv_row(&self, step: usize) -> [String; 5] {
        [
            step.to_string(),
            format!("{:e}", self.ce),
            format!("{:e}", self.asl),
            format!("{:e}", self.ccl),
            format!("{:e}", self.total),
        ]
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.asl, self.ccl, self.total].iter().all(|v| v.is_finite())
    }
}

/// Projectors for the contrastive terms: encoder and decoder side per branch.
#[derive(Clone, Debug)]
pub struct HdProjectors {
    pub enc_m: ClassProjector,
    pub dec_m: ClassProjector,
    pub enc_d: ClassProjector,
    pub dec_d: ClassProjector,
}

impl HdProjectors {
    pub fn new(store: &mut ParamStore, name: &str, enc_channels: usize, dec_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            enc_m: ClassProjector::new(store, &format!("{name}.enc_m"), enc_channels, rng),
            dec_m: ClassProjector::new(store, &format!("{name}.dec_m"), dec_channels, rng),
            enc_d: ClassProjector::new(store, &format!("{name}.enc_d"), enc_channels, rng),
            dec_d: ClassProjector::new(store, &format!("{name}.dec_d"), dec_channels, rng),
        }
    }
}

/// Graph values feeding the disparity-enhancing terms.
#[derive(Clone, Copy, Debug)]
pub struct HdInputs<'a> {
    pub r_m: Var,
    pub r_d: Var,
    pub enc_m: Var,
    pub dec_m: Var,
    pub enc_d: Var,
    pub dec_d: Var,
    pub projectors: &'a HdProjectors,
}

/// `ce + lambda * (asl + ccl_M + ccl_D)`; only `ce` when `hd` is `None`.
pub fn total_loss(
    g: &mut Graph,
    store: &ParamStore,
    final_logits: Var,
    hd: Option<HdInputs<'_>>,
    mask: &LabelMask,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} must be finite and >= 0")));
    }
    let ce = ce_loss(g, final_logits, mask)?;
    let mut breakdown = LossBreakdown {
        ce: g.value(ce).item(),
        ..Default::default()
    };
    let Some(hd) = hd else {
        breakdown.total = breakdown.ce;
        return Ok((ce, breakdown));
    };
    let asl = adaptive_softmax_loss(g, hd.r_m, hd.r_d, mask)?;
    let p = hd.projectors;
    let ccl_m = class_contrastive_loss(g, store, &p.enc_m, &p.dec_m, hd.enc_m, hd.dec_m, mask);
    let ccl_d = class_contrastive_loss(g, store, &p.enc_d, &p.dec_d, hd.enc_d, hd.dec_d, mask);
    let ccl = g.add(ccl_m, ccl_d);
    let hd_sum = g.add(asl, ccl);
    let weighted = g.scale(hd_sum, lambda);
    let total = g.add(ce, weighted);
    breakdown.asl = g.value(asl).item();
    breakdown.ccl = g.value(ccl).item();
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}
