use proptest::prelude::*;

use cscn::data::{load_cube, load_labels, save_cube, save_labels, split, train_quota, LabelMask};
use cscn::spectra::{synth_scene, SynthSceneSpec};

fn mask_strategy() -> impl Strategy<Value = LabelMask> {
    (1usize..12, 1usize..12, 1u16..6)
        .prop_flat_map(|(h, w, c)| (Just((h, w, c)), prop::collection::vec(0..=c, h * w)))
        .prop_filter_map("needs every class", |((h, w, c), labels)| {
            let all = (1..=c).all(|k| labels.contains(&k));
            all.then(|| LabelMask::new(h, w, c, labels).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_draws_per_class_quota(mask in mask_strategy(), ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let sp = split(&mask, ratio, seed).unwrap();
        let counts = mask.class_pixel_counts();
        let mut train = vec![0usize; counts.len()];
        let mut test = vec![0usize; counts.len()];
        for (i, &l) in mask.labels().iter().enumerate() {
            prop_assert!(!(sp.train[i] && sp.test[i]));
            if l == 0 {
                prop_assert!(!sp.train[i] && !sp.test[i]);
                continue;
            }
            prop_assert!(sp.train[i] || sp.test[i]);
            if sp.train[i] { train[l as usize - 1] += 1 } else { test[l as usize - 1] += 1 }
        }
        for (c, &n) in counts.iter().enumerate() {
            prop_assert_eq!(train[c], train_quota(n, ratio));
            prop_assert_eq!(train[c] + test[c], n);
            prop_assert!(train[c] >= 1);
        }
    }
}

#[test]
fn rasters_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, mask) = synth_scene(&SynthSceneSpec::default()).unwrap();
    let (cp, lp) = (dir.path().join("c.raw"), dir.path().join("l.raw"));
    save_cube(&cube, &cp).unwrap();
    save_labels(&mask, &lp).unwrap();
    assert_eq!(load_cube(&cp).unwrap(), cube);
    assert_eq!(load_labels(&lp).unwrap(), mask);
}

#[test]
fn restriction_hides_everything_outside_the_region() {
    let mask = LabelMask::new(2, 2, 2, vec![1, 2, 2, 1]).unwrap();
    let r = mask.restricted(&[true, false, false, true]);
    assert_eq!(r.labels(), &[1, 0, 0, 1]);
    assert_eq!(r.class_count(), 2);
}
