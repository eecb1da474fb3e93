use std::collections::VecDeque;

use proptest::collection::vec;
use proptest::prelude::*;

use tcopilot::checkpoint;
use tcopilot::copilot::{rmse_loss, RMSE_EPS};
use tcopilot::inference::{greedy_pick, rectify};
use tcopilot::kv::KvMap;
use tcopilot::mistake_log::{discrepancy_rows, MistakeLogBuffer, MistakeLogEntry};
use tcopilot::numerics::{cosine_lr, softmax, ParameterSet, Tensor};

fn logits_and_targets() -> impl Strategy<Value = (usize, Vec<f64>, Vec<u32>)> {
    (1usize..12, 1usize..5).prop_flat_map(|(v, n)| {
        (Just(v), vec(-40.0f64..40.0, v * n), vec(0..v as u32, n))
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&z).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_ignores_shifts(z in vec(-20.0f64..20.0, 1..20), c in -100.0f64..100.0) {
        let a = softmax(&z).unwrap();
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn discrepancy_rows_sum_to_zero((v, z, t) in logits_and_targets()) {
        let n = t.len();
        let d = discrepancy_rows(&Tensor::new(vec![n, v], z).unwrap(), &t).unwrap();
        for r in 0..n {
            let row = d.row(r);
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            prop_assert!(row.iter().all(|x| (-1.0..=1.0).contains(x)));
            prop_assert!(row[t[r] as usize] >= 0.0);
        }
    }

    #[test]
    fn rectify_is_affine_in_lambda(
        (p, f) in (1usize..10).prop_flat_map(|v| (vec(0.0f64..1.0, v), vec(-1.0f64..1.0, v))),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
    ) {
        let pa = rectify(&p, &f, a).unwrap();
        let pb = rectify(&p, &f, b).unwrap();
        let pm = rectify(&p, &f, (a + b) / 2.0).unwrap();
        for i in 0..p.len() {
            prop_assert!((pm[i] - (pa[i] + pb[i]) / 2.0).abs() < 1e-12);
        }
        let total: f64 = pa.iter().sum();
        let want = p.iter().sum::<f64>() + a * f.iter().sum::<f64>();
        prop_assert!((total - want).abs() < 1e-9);
        prop_assert_eq!(rectify(&p, &f, 0.0).unwrap(), p);
    }

    #[test]
    fn greedy_pick_returns_a_maximum(s in vec(-5.0f64..5.0, 1..16)) {
        let i = greedy_pick(&s).unwrap();
        prop_assert!(s.iter().all(|&x| x <= s[i]));
        prop_assert!(s[..i].iter().all(|&x| x < s[i]));
    }

    #[test]
    fn rmse_is_symmetric_and_vanishes_on_equality(
        (a, b, mask) in (1usize..5, 1usize..6).prop_flat_map(|(n, v)| {
            (vec(-1.0f64..1.0, n * v), vec(-1.0f64..1.0, n * v), vec(any::<bool>(), n))
                .prop_map(move |(a, b, m)| ((n, v, a), b, m))
        })
    ) {
        let ((n, v, a), b, mut mask) = (a, b, mask);
        mask[0] = true;
        let ta = Tensor::new(vec![n, v], a).unwrap();
        let tb = Tensor::new(vec![n, v], b).unwrap();
        let ab = rmse_loss(&ta, &tb, &mask).unwrap();
        let ba = rmse_loss(&tb, &ta, &mask).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((rmse_loss(&ta, &ta, &mask).unwrap() - RMSE_EPS.sqrt()).abs() < 1e-15);
        prop_assert!(ab >= RMSE_EPS.sqrt());
    }

    #[test]
    fn log_keeps_the_newest_entries(cap in 1usize..20, gaps in vec(1u64..4, 0..80)) {
        let mut buf = MistakeLogBuffer::<f32>::new(Some(cap)).unwrap();
        let mut model = VecDeque::new();
        let mut round = 0;
        for g in gaps {
            round += g;
            buf.record(MistakeLogEntry { round, examples: vec![] }).unwrap();
            model.push_back(round);
            if model.len() > cap {
                model.pop_front();
            }
            prop_assert!(buf.len() <= cap);
            let live: Vec<u64> = buf.entries().map(|e| e.round).collect();
            prop_assert_eq!(live, model.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn checkpoints_round_trip(
        tensors in vec((1usize..4, 1usize..5).prop_flat_map(|(r, c)| (Just(vec![r, c]), vec(any::<f32>(), r * c))), 1..6),
        keys in vec(("[a-z_]{1,8}", "[a-zA-Z0-9_.]{0,12}"), 0..6),
    ) {
        let mut params = ParameterSet::<f32>::new();
        for (i, (shape, data)) in tensors.into_iter().enumerate() {
            params.insert(format!("layer.{i}.weight"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let mut kv = KvMap::new();
        for (k, v) in &keys {
            kv.insert(k.as_str(), v);
        }
        let bytes = checkpoint::encode(&kv, &params);
        let (kv2, p2) = checkpoint::decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&kv2, &p2), bytes);
        for ((n1, t1), (n2, t2)) in params.iter().zip(p2.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
            let bits2: Vec<u32> = t2.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits1, bits2);
        }
        prop_assert_eq!(KvMap::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn cosine_schedule_stays_in_range(total in 1usize..500, warm in 0usize..50, step in 0usize..600, lr in 1e-5f64..1.0) {
        let warm = warm.min(total);
        let step = step.min(total);
        let v = cosine_lr(step, warm, total, lr).unwrap();
        prop_assert!((0.0..=lr * (1.0 + 1e-12)).contains(&v));
    }
}
