use std::collections::VecDeque;

use noisetransfer::contrastive::{cosine_sim, info_nce, momentum_update, EmbeddingQueue};
use noisetransfer::image::ImagePatch;
use noisetransfer::metrics::{kl_divergence, ks_histograms, NoiseHistogram, BINS};
use nt_autodiff::{ParamStore, Tensor};
use proptest::prelude::*;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64)> {
    (2usize..12).prop_flat_map(|d| (vector(d), vector(d), prop::collection::vec(vector(d), 0..20), 0.05f64..2.0))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Moves `k` towards `target` on the sphere, raising its cosine with `target`.
fn towards(k: &[f64], target: &[f64], t: f64) -> Vec<f64> {
    let (k, target) = (unit(k), unit(target));
    k.iter().zip(&target).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

proptest! {
    #[test]
    fn loss_is_nonnegative((q, k, negs, tau) in instance()) {
        let l = info_nce(&q, &k, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn loss_decreases_as_positive_aligns((q, k, negs, tau) in instance(), t in 0.05f64..0.95) {
        let k2 = towards(&k, &q, t);
        prop_assume!(k2.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let (s1, s2) = (cosine_sim(&q, &k).unwrap(), cosine_sim(&q, &k2).unwrap());
        let l1 = info_nce(&q, &k, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        let l2 = info_nce(&q, &k2, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        prop_assert!(s2 >= s1 - 1e-12);
        prop_assert!(l2 <= l1 + 1e-9, "s {s1} -> {s2}, loss {l1} -> {l2}");
    }

    #[test]
    fn loss_increases_as_negative_aligns((q, k, mut negs, tau) in instance(), t in 0.05f64..0.95) {
        prop_assume!(!negs.is_empty());
        let before = info_nce(&q, &k, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        negs[0] = towards(&negs[0], &q, t);
        prop_assume!(negs[0].iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let after = info_nce(&q, &k, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        prop_assert!(after >= before - 1e-9, "loss {before} -> {after}");
    }

    #[test]
    fn loss_is_scale_invariant((q, k, negs, tau) in instance(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let l = info_nce(&q, &k, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        let qs: Vec<f64> = q.iter().map(|x| x * a).collect();
        let ks: Vec<f64> = k.iter().map(|x| x * b).collect();
        let ls = info_nce(&qs, &ks, negs.iter().map(|v| v.as_slice()), tau).unwrap();
        prop_assert!((l - ls).abs() <= 1e-9 * (1.0 + l), "{l} vs {ls}");
    }

    #[test]
    fn cosine_is_bounded(u in vector(6), v in vector(6)) {
        let s = cosine_sim(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn momentum_lands_between(
        key in prop::collection::vec(-5.0f64..5.0, 1..40),
        shift in prop::collection::vec(0.01f64..3.0, 40),
        m in 0.01f64..0.99,
    ) {
        let n = key.len();
        let query: Vec<f64> = key.iter().zip(&shift).map(|(k, s)| if (k * 1e3) as i64 % 2 == 0 { k + s } else { k - s }).collect();
        let mut qs = ParamStore::<f64>::new();
        qs.add("w", Tensor::new(vec![n], query.clone()));
        let mut ks = ParamStore::<f64>::new();
        ks.add("w", Tensor::new(vec![n], key.clone()));
        momentum_update(&qs, &mut ks, m).unwrap();
        let id = ks.find("w").unwrap();
        for ((new, old), q) in ks.get(id).data().iter().zip(&key).zip(&query) {
            let (lo, hi) = if old < q { (old, q) } else { (q, old) };
            prop_assert!(lo < new && new < hi, "{new} not strictly within ({lo}, {hi})");
        }
    }

    #[test]
    fn queue_matches_fifo_model(cap in 1usize..9, pushes in prop::collection::vec(1usize..12, 0..12)) {
        let dim = 2;
        let mut q = EmbeddingQueue::new(cap, dim);
        let mut model: VecDeque<Vec<f64>> = VecDeque::new();
        let mut next = 0.0;
        for n in pushes {
            let mut flat = Vec::new();
            for _ in 0..n {
                let row = vec![next, -next];
                next += 1.0;
                flat.extend_from_slice(&row);
                model.push_back(row);
                if model.len() > cap {
                    model.pop_front();
                }
            }
            q.enqueue(&flat);
            prop_assert_eq!(q.len(), model.len());
            let got: Vec<Vec<f64>> = q.iter().map(|r| r.to_vec()).collect();
            prop_assert_eq!(&got, &model.iter().cloned().collect::<Vec<_>>());
        }
    }

    #[test]
    fn histogram_conserves_mass(values in prop::collection::vec(-600.0f64..600.0, 1..500)) {
        let h = NoiseHistogram::from_values(&values);
        prop_assert_eq!(h.total(), values.len() as u64);
        prop_assert_eq!(h.counts().iter().sum::<u64>(), values.len() as u64);
        prop_assert!((h.normalized().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((h.smoothed().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let below = values.iter().filter(|&&v| v < -256.0).count() as u64;
        prop_assert!(h.counts()[0] >= below);
        let above = values.iter().filter(|&&v| v >= 256.0).count() as u64;
        prop_assert!(h.counts()[BINS - 1] >= above);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(
        a in prop::collection::vec(-300.0f64..300.0, 1..300),
        b in prop::collection::vec(-300.0f64..300.0, 1..300),
    ) {
        let (ha, hb) = (NoiseHistogram::from_values(&a), NoiseHistogram::from_values(&b));
        let (ab, ba) = (ks_histograms(&ha, &hb), ks_histograms(&hb, &ha));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ks_histograms(&ha, &ha), 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        a in prop::collection::vec(-300.0f64..300.0, 1..300),
        b in prop::collection::vec(-300.0f64..300.0, 1..300),
    ) {
        let (ha, hb) = (NoiseHistogram::from_values(&a), NoiseHistogram::from_values(&b));
        prop_assert!(kl_divergence(&ha, &hb) >= -1e-12);
        prop_assert!(kl_divergence(&ha, &ha).abs() <= 1e-12);
    }

    #[test]
    fn dihedral_permutes_pixels(h in 1usize..7, w in 1usize..7, k in 0u8..8, seed in any::<u64>()) {
        let data: Vec<f32> = (0..h * w * 2).map(|i| ((i as u64).wrapping_mul(seed | 1) % 997) as f32).collect();
        let img = ImagePatch::new(h, w, 2, data);
        let t = img.dihedral(k);
        let (th, tw, _) = t.dims();
        prop_assert_eq!(if k % 2 == 0 { (h, w) } else { (w, h) }, (th, tw));
        let mut a = img.data().to_vec();
        let mut b = t.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
    }
}
