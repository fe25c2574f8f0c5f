mod common;

use m2ctts_core::autodiff::{masked_softmax_rows, Mat};
use m2ctts_core::backbone::{bin_boundaries, bucketize, length_regulation_index};
use m2ctts_core::config::{parse_override_args, RunConfig};
use m2ctts_core::corpus::window;
use m2ctts_core::extractors::cache::CacheTensor;
use m2ctts_core::prosody::prosody_loss;
use m2ctts_core::training::{schedule, split_dialogues};
use proptest::prelude::*;

use common::{plain_dialogue, softmax_oracle, window_oracle};

fn scores_and_mask() -> impl Strategy<Value = (Mat, Vec<bool>)> {
    (1usize..6, 1usize..9).prop_flat_map(|(q, k)| {
        (
            prop::collection::vec(-30.0f64..30.0, q * k),
            prop::collection::vec(any::<bool>(), k),
            0..k,
        )
            .prop_map(move |(s, mut m, keep)| {
                m[keep] = true;
                (Mat::from_shape_vec((q, k), s).unwrap(), m)
            })
    })
}

proptest! {
    #[test]
    fn window_matches_index_filter(len in 1usize..60, t_frac in 0.0f64..1.0, c in 0usize..16) {
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        let d = plain_dialogue(len);
        let w = window(&d, t, c).unwrap();
        let got: Vec<usize> = w.history.iter().map(|x| x.turn_index).collect();
        prop_assert_eq!(got.len(), t.min(c));
        prop_assert_eq!(got, window_oracle(len, t, c));
        prop_assert!(window(&d, len, c).is_err());
    }

    #[test]
    fn masked_softmax_rows_are_distributions((scores, mask) in scores_and_mask()) {
        let w = masked_softmax_rows(&scores, &mask).unwrap();
        let oracle = softmax_oracle(&scores, &mask);
        for (row, orow) in w.rows().into_iter().zip(oracle.rows()) {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-5);
            for ((x, o), m) in row.iter().zip(orow).zip(&mask) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - o).abs() <= 1e-12);
                if !m { prop_assert_eq!(*x, 0.0); }
            }
        }
    }

    #[test]
    fn softmax_ignores_masked_scores((scores, mask) in scores_and_mask(), junk in -1e3f64..1e3) {
        let mut moved = scores.clone();
        for mut row in moved.rows_mut() {
            for (x, m) in row.iter_mut().zip(&mask) {
                if !m { *x = junk; }
            }
        }
        let a = masked_softmax_rows(&scores, &mask).unwrap();
        let b = masked_softmax_rows(&moved, &mask).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bucketize_is_monotone_and_in_range(
        lo in -5.0f64..0.0, width in 0.1f64..5.0, n_bins in 2usize..64,
        a in -10.0f64..10.0, b in -10.0f64..10.0,
    ) {
        let bounds = bin_boundaries([lo, lo + width], n_bins);
        prop_assert_eq!(bounds.len(), n_bins - 1);
        prop_assert!(bounds.windows(2).all(|w| w[0] < w[1]));
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        let (bx, by) = (bucketize(x, &bounds), bucketize(y, &bounds));
        prop_assert!(bx <= by);
        prop_assert!(by < n_bins);
    }

    #[test]
    fn length_regulation_expands_in_order(durations in prop::collection::vec(0usize..6, 1..12), extra in 0usize..5) {
        let total: usize = durations.iter().sum();
        let idx = length_regulation_index(&durations, total + extra);
        prop_assert_eq!(idx.len(), total + extra);
        let real: Vec<usize> = idx.iter().flatten().copied().collect();
        prop_assert_eq!(real.len(), total);
        prop_assert!(idx[total..].iter().all(Option::is_none));
        let mut expected = Vec::new();
        for (i, &d) in durations.iter().enumerate() {
            expected.extend(std::iter::repeat_n(i, d));
        }
        prop_assert_eq!(real, expected);
    }

    #[test]
    fn schedule_is_an_epoch_permutation(n in 1usize..40, bs in 1usize..9, seed in any::<u64>()) {
        let per_epoch = n.div_ceil(bs) as u64;
        let mut seen: Vec<usize> = (0..per_epoch).flat_map(|s| schedule(n, bs, seed, s)).collect();
        prop_assert!((0..per_epoch).all(|s| schedule(n, bs, seed, s) == schedule(n, bs, seed, s)));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cache_tensor_bytes_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
        let t = CacheTensor::new(dims, data).unwrap();
        let back = CacheTensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(&back.dims, &t.dims);
        prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(CacheTensor::from_bytes(&t.to_bytes()[..t.to_bytes().len() - 1]).is_err());
    }

    #[test]
    fn prosody_loss_is_a_scaled_squared_distance(
        a in prop::collection::vec(-10.0f64..10.0, 1..16),
        shift in -3.0f64..3.0,
    ) {
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert_eq!(prosody_loss(&a, &a).unwrap(), 0.0);
        let l = prosody_loss(&a, &b).unwrap();
        prop_assert!((l - shift * shift).abs() <= 1e-9);
        prop_assert_eq!(l, prosody_loss(&b, &a).unwrap());
    }

    #[test]
    fn held_out_split_keeps_training_data(n in 1usize..50, frac in 0.0f64..1.0) {
        let dialogues: Vec<_> = (0..n).map(|_| plain_dialogue(2)).collect();
        let (train, val) = split_dialogues(&dialogues, frac);
        prop_assert!(!train.is_empty());
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert_eq!(val.len(), ((n as f64 * frac).floor() as usize).min(n - 1));
    }

    #[test]
    fn overrides_set_values(steps in 1u64..10_000, lr in 1e-6f64..1.0, c in 1usize..9) {
        let args: Vec<String> = [
            "--train.steps".into(), steps.to_string(),
            format!("--train.lr={lr}"),
            "--data.c".into(), c.to_string(),
        ].to_vec();
        let cfg = RunConfig::desk().with_overrides(&parse_override_args(&args).unwrap()).unwrap();
        prop_assert_eq!(cfg.train.steps, steps);
        prop_assert_eq!(cfg.train.lr, lr);
        prop_assert_eq!(cfg.data.c, c);
        prop_assert_eq!(cfg.model, RunConfig::desk().model);
    }
}
