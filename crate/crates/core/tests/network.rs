use proptest::prelude::*;

use cscn::autograd::Graph;
use cscn::network::{stage_dims, Encoder, EncoderConfig};
use cscn::params::ParamStore;
use cscn::rng::seeded;
use cscn::tensor::Tensor;
use rand::Rng;

fn encoder(schedule: Vec<usize>, bands: usize, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        channel_schedule: schedule,
        input_bands: bands,
        kernel: 3,
    };
    let enc = Encoder::new(&mut store, "e", cfg, &mut seeded(seed, 0)).unwrap();
    (store, enc)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed, 1);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stage_shapes_follow_the_schedule(h in 4usize..20, w in 4usize..20, n in 2usize..4, bands in 1usize..5) {
        prop_assume!(h >> (n - 1) >= 2 && w >> (n - 1) >= 2);
        let schedule: Vec<usize> = (1..=n).map(|s| 2 * s).collect();
        let (store, enc) = encoder(schedule.clone(), bands, 0);
        let mut g = Graph::new();
        let x = g.constant(random(&[h, w, bands], 1));
        let out = enc.forward(&mut g, &store, x).unwrap();
        let dims = stage_dims(h, w, n);
        prop_assert_eq!(out.stages.len(), n);
        for (s, &v) in out.stages.iter().enumerate() {
            let (sh, sw) = dims[s + 1];
            prop_assert_eq!(g.value(v).shape(), &[sh, sw, schedule[s]]);
            prop_assert!(g.value(v).is_finite());
        }
    }
}

#[test]
fn micro_encoder_gradients_match_finite_differences() {
    let (store, enc) = encoder(vec![3, 4], 2, 11);
    let input = random(&[4, 4, 2], 12);
    // Fixed readout weights turn every stage into a scalar.
    let readouts: Vec<Tensor> = [(2, 3), (1, 4)]
        .iter()
        .enumerate()
        .map(|(i, &(s, c))| random(&[s, s, c], 20 + i as u64))
        .collect();
    let loss_graph = |g: &mut Graph, store: &ParamStore, x| {
        let out = enc.forward(g, store, x).unwrap();
        let mut total = None;
        for (v, r) in out.stages.iter().zip(&readouts) {
            let r = g.constant(r.clone());
            let dots = g.point_dot(*v, r, 1.0);
            let (h, w, _) = g.value(dots).dims3();
            let summed = g.class_sum(dots, vec![Some(0); h * w], 1);
            total = Some(match total {
                None => summed,
                Some(t) => g.add(t, summed),
            });
        }
        total.unwrap()
    };
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = loss_graph(&mut g, store, xv);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let xv = g.variable(input.clone());
    let l = loss_graph(&mut g, &store, xv);
    let grads = g.backward(l);
    let pg = g.param_grads(&grads, &store);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    };
    for i in 0..input.len() {
        let (mut up, mut down) = (input.clone(), input.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        check(grads.get(xv).unwrap().data()[i], (eval(&store, &up) - eval(&store, &down)) / (2.0 * h));
    }
    for (id, _, value) in store.iter() {
        for i in 0..value.len() {
            let (mut up, mut down) = (store.clone(), store.clone());
            up.get_mut(id).data_mut()[i] += h;
            down.get_mut(id).data_mut()[i] -= h;
            check(pg[id.index()].data()[i], (eval(&up, &input) - eval(&down, &input)) / (2.0 * h));
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst:e}");
}
