//! Point-wise fusion of the magnitude and derivative branches.
//!
//! At every stage both branch features are embedded to `C_f` channels. The
//! current fused state acts as the query and each embedding as a key, and a
//! softmax over the two similarity scores at each pixel gives the blend
//! weights `(A_M, A_D)`. The blend is refined by a conv block and upsampled
//! to the next (shallower) stage.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{ConvBlock, ConvBlockConfig, EncoderOutput, Pointwise};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Learned per-point weights.
    #[default]
    Adaptive,
    /// Fixed 0.5/0.5 blend.
    Average,
    /// Magnitude branch only; no derivative input.
    Single,
}

/// `(A_M, A_D)` for one point from the two similarity scores.
pub fn pair_weights(s_m: f64, s_d: f64) -> (f64, f64) {
    let m = s_m.max(s_d);
    let (em, ed) = ((s_m - m).exp(), (s_d - m).exp());
    (em / (em + ed), ed / (em + ed))
}

/// `A_M * X_M + A_D * X_D` per point; weights are `[H, W, 1]`.
pub fn fuse_point(g: &mut Graph, x_m: Var, x_d: Var, a_m: Var, a_d: Var) -> Var {
    let wm = g.scale_points(x_m, a_m);
    let wd = g.scale_points(x_d, a_d);
    g.add(wm, wd)
}

/// Fused map at `C_f` channels entering or leaving a stage.
#[derive(Clone, Copy, Debug)]
pub struct FusionState {
    pub fused: Var,
    pub stage: usize,
}

#[derive(Clone, Debug)]
pub struct FusionStage {
    mode: FusionMode,
    embed_m: Pointwise,
    embed_d: Option<Pointwise>,
    w_q: Option<Pointwise>,
    w_k_m: Option<Pointwise>,
    w_k_d: Option<Pointwise>,
    refine: ConvBlock,
    pub fused_channels: usize,
}

/// Result of one stage: the refined state and, in adaptive mode, `A_M`.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub state: FusionState,
    pub weight_m: Option<Var>,
}

impl FusionStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: FusionMode,
        channels_m: usize,
        channels_d: usize,
        fused_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cf = fused_channels;
        let embed_m = Pointwise::new(store, &format!("{name}.embed_m"), channels_m, cf, true, rng);
        let embed_d = (mode != FusionMode::Single)
            .then(|| Pointwise::new(store, &format!("{name}.embed_d"), channels_d, cf, true, rng));
        let adaptive = mode == FusionMode::Adaptive;
        let proj = |store: &mut ParamStore, tag: &str, rng: &mut _| {
            adaptive.then(|| Pointwise::new(store, &format!("{name}.{tag}"), cf, cf, false, rng))
        };
        // A zero query makes every score 0, so learned weights start as an
        // even blend.
        let w_q = adaptive.then(|| Pointwise::zeroed(store, &format!("{name}.w_q"), cf, cf));
        let w_k_m = proj(store, "w_k_m", rng);
        let w_k_d = proj(store, "w_k_d", rng);
        let refine = ConvBlock::new(
            store,
            &format!("{name}.refine"),
            ConvBlockConfig::new(cf, cf, kernel)?,
            rng,
        )?;
        Ok(Self {
            mode,
            embed_m,
            embed_d,
            w_q,
            w_k_m,
            w_k_d,
            refine,
            fused_channels: cf,
        })
    }

    /// Maps both branch features to `C_f` channels.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, f_m: Var, f_d: Var) -> Result<(Var, Var)> {
        let (hm, wm, _) = g.value(f_m).dims3();
        let (hd, wd, _) = g.value(f_d).dims3();
        if (hm, wm) != (hd, wd) {
            return Err(Error::SpatialMismatch((hm, wm), (hd, wd)));
        }
        let embed_d = self
            .embed_d
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("single-branch stage has no derivative embedding".into()))?;
        let x_m = self.embed_m.forward(g, store, f_m)?;
        let x_d = embed_d.forward(g, store, f_d)?;
        Ok((x_m, x_d))
    }

    /// Per-point `(A_M, A_D)` as `[H, W, 1]` maps.
    pub fn point_weights(&self, g: &mut Graph, store: &ParamStore, query: Var, x_m: Var, x_d: Var) -> Result<(Var, Var)> {
        let (Some(w_q), Some(w_k_m), Some(w_k_d)) = (&self.w_q, &self.w_k_m, &self.w_k_d) else {
            return Err(Error::InvalidParameter("stage has no attention projections".into()));
        };
        let q = w_q.forward(g, store, query)?;
        let k_m = w_k_m.forward(g, store, x_m)?;
        let k_d = w_k_d.forward(g, store, x_d)?;
        let scale = 1.0 / (self.fused_channels as f64).sqrt();
        let s_m = g.point_dot(q, k_m, scale);
        let s_d = g.point_dot(q, k_d, scale);
        let a_m = g.pair_softmax(s_m, s_d);
        let a_d = g.pair_softmax(s_d, s_m);
        Ok((a_m, a_d))
    }

    /// Fuses one stage. `state` is the previous fused map already resized to
    /// this stage; `None` at the deepest stage, where the query is the mean
    /// of the two embeddings. `f_d` is ignored in single-branch mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Option<Var>,
        f_m: Var,
        f_d: Var,
        stage: usize,
    ) -> Result<StageOutput> {
        let (fused, weight_m) = match self.mode {
            FusionMode::Single => (self.embed_m.forward(g, store, f_m)?, None),
            FusionMode::Average => {
                let (x_m, x_d) = self.embed(g, store, f_m, f_d)?;
                let sum = g.add(x_m, x_d);
                (g.scale(sum, 0.5), None)
            }
            FusionMode::Adaptive => {
                let (x_m, x_d) = self.embed(g, store, f_m, f_d)?;
                let query = match state {
                    Some(s) => s,
                    None => {
                        let sum = g.add(x_m, x_d);
                        g.scale(sum, 0.5)
                    }
                };
                let (a_m, a_d) = self.point_weights(g, store, query, x_m, x_d)?;
                (fuse_point(g, x_m, x_d, a_m, a_d), Some(a_m))
            }
        };
        let fused = self.refine.forward(g, store, fused)?;
        Ok(StageOutput {
            state: FusionState { fused, stage },
            weight_m,
        })
    }
}

/// Stage-1 fused map plus the `A_M` map of every stage (deepest first) when
/// weights are learned.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub weights_m: Vec<Var>,
}

/// The progressive pathway over all stages, deepest to shallowest.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    /// Indexed by stage - 1.
    stages: Vec<FusionStage>,
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: FusionMode,
        schedule: &[usize],
        fused_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if fused_channels == 0 {
            return Err(Error::InvalidParameter("fused channels must be positive".into()));
        }
        let stages = schedule
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                FusionStage::new(
                    store,
                    &format!("{name}.s{}", i + 1),
                    mode,
                    c,
                    c,
                    fused_channels,
                    kernel,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { mode, stages })
    }

    /// `enc_d` may equal `enc_m` in single-branch mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc_m: &EncoderOutput,
        enc_d: &EncoderOutput,
    ) -> Result<FusionOutput> {
        let n = self.stages.len();
        if enc_m.stages.len() != n || enc_d.stages.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "fusion has {n} stages, encoders give {} and {}",
                enc_m.stages.len(),
                enc_d.stages.len()
            )));
        }
        let mut state: Option<Var> = None;
        let mut weights_m = Vec::new();
        for s in (0..n).rev() {
            let out = self.stages[s].forward(g, store, state, enc_m.stages[s], enc_d.stages[s], s + 1)?;
            weights_m.extend(out.weight_m);
            let fused = out.state.fused;
            state = Some(if s > 0 {
                let (h, w, _) = g.value(enc_m.stages[s - 1]).dims3();
                g.upsample_bilinear(fused, h, w)
            } else {
                fused
            });
        }
        Ok(FusionOutput {
            fused: state.expect("at least one stage"),
            weights_m,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed, 4);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn stage(mode: FusionMode, c: usize, cf: usize) -> (ParamStore, FusionStage) {
        let mut store = ParamStore::new();
        let st = FusionStage::new(&mut store, "f", mode, c, c, cf, 3, &mut seeded(5, 0)).unwrap();
        (store, st)
    }

    #[test]
    fn closed_form_pair_weights() {
        let (a, b) = pair_weights(3f64.ln(), 0.0);
        assert!((a - 0.75).abs() < 1e-12 && (b - 0.25).abs() < 1e-12);
        let (a, b) = pair_weights(2.0 + 7.5, 1.0 + 7.5);
        let (c, d) = pair_weights(2.0, 1.0);
        assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_give_half_weights() {
        let (mut store, st) = stage(FusionMode::Adaptive, 6, 8);
        let k_m = store.get(store.id("f.w_k_m.w").unwrap()).clone();
        *store.get_mut(store.id("f.w_k_d.w").unwrap()) = k_m;
        let q_id = store.id("f.w_q.w").unwrap();
        *store.get_mut(q_id) = random(&[1, 1, 8, 8], 9);
        let mut g = Graph::new();
        let q = g.constant(random(&[3, 3, 8], 1));
        let x = g.constant(random(&[3, 3, 8], 2));
        let y = g.constant(g.value(x).clone());
        let (a_m, a_d) = st.point_weights(&mut g, &store, q, x, y).unwrap();
        for (m, d) in g.value(a_m).data().iter().zip(g.value(a_d).data()) {
            assert!((m - 0.5).abs() < 1e-12 && (d - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_shapes_and_mismatch() {
        let (store, st) = stage(FusionMode::Adaptive, 12, 8);
        let mut g = Graph::new();
        let a = g.constant(random(&[4, 4, 12], 1));
        let b = g.constant(random(&[4, 4, 12], 2));
        let (x_m, x_d) = st.embed(&mut g, &store, a, b).unwrap();
        assert_eq!(g.value(x_m).shape(), &[4, 4, 8]);
        assert_eq!(g.value(x_d).shape(), &[4, 4, 8]);
        let z = g.constant(Tensor::zeros(&[4, 4, 12]));
        let (zm, _) = st.embed(&mut g, &store, z, z).unwrap();
        assert!(g.value(zm).data().iter().all(|&v| v == 0.0));
        let c = g.constant(random(&[2, 4, 12], 3));
        assert!(matches!(st.embed(&mut g, &store, a, c), Err(Error::SpatialMismatch(..))));
    }

    #[test]
    fn fuse_point_is_convex() {
        let mut g = Graph::new();
        let x_m = g.constant(random(&[3, 2, 5], 1));
        let x_d = g.constant(random(&[3, 2, 5], 2));
        let a = random(&[3, 2, 1], 3).map(|v| (v + 1.0) / 2.0);
        let a_m = g.constant(a.clone());
        let a_d = g.constant(a.map(|v| 1.0 - v));
        let f = fuse_point(&mut g, x_m, x_d, a_m, a_d);
        let (m, d, out) = (g.value(x_m).data(), g.value(x_d).data(), g.value(f).data());
        for i in 0..out.len() {
            assert!(out[i] >= m[i].min(d[i]) - 1e-12 && out[i] <= m[i].max(d[i]) + 1e-12);
        }
        let one = g.constant(Tensor::full(&[3, 2, 1], 1.0));
        let zero = g.constant(Tensor::zeros(&[3, 2, 1]));
        let sel = fuse_point(&mut g, x_m, x_d, one, zero);
        assert_eq!(g.value(sel), g.value(x_m));
    }

    #[test]
    fn pathway_shapes() {
        let schedule = [4, 6, 8, 10];
        let mut store = ParamStore::new();
        let mut rng = seeded(2, 0);
        let fusion = Fusion::new(&mut store, "fu", FusionMode::Adaptive, &schedule, 8, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let mk = |g: &mut Graph, seed| EncoderOutput {
            stages: schedule
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let n = 32 >> (i + 1);
                    g.constant(random(&[n, n, c], seed + i as u64))
                })
                .collect(),
        };
        let em = mk(&mut g, 10);
        let ed = mk(&mut g, 20);
        let out = fusion.forward(&mut g, &store, &em, &ed).unwrap();
        assert_eq!(g.value(out.fused).shape(), &[16, 16, 8]);
        let sizes: Vec<usize> = out.weights_m.iter().map(|&w| g.value(w).shape()[0]).collect();
        assert_eq!(sizes, vec![2, 4, 8, 16]);
    }
}
