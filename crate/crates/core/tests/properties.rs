mod common;

use std::collections::BTreeMap;

use common::{perturb, random_matrix, rng};
use proptest::prelude::*;
use safrlm::align::{align_pair, conv_align, out_len, Aligner, ConvConfig, ConvLayer, GruConfig};
use safrlm::data::{generate_synthetic, load_jsonl, make_batches, SplitRole, SyntheticSpec};
use safrlm::fusion::collab_attention;
use safrlm::heads::{joint_loss, PredictionTriple};
use safrlm::metrics::sentiment_class;
use safrlm::params::{ParamBuilder, ParamStore};
use safrlm::xadjust::{self_adjust, AdjustStack, ScaleMode, XadjustConfig};

fn small_spec(n: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_records: n,
        text_len: (1, 6),
        audio_len: (2, 9),
        d_text: 3,
        d_audio: 2,
        seed,
        noise_sigma: 0.5,
        ..SyntheticSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_length_formula(len in 1usize..60, kernel in 1usize..12, stride in 1usize..8, seed in 0u64..1000) {
        let expected = if len >= kernel { Some((len - kernel) / stride + 1) } else { None };
        prop_assert_eq!(out_len(len, kernel, stride), expected);
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(seed);
        let layer = ConvLayer::build(&mut ParamBuilder::new(&mut store, &mut r, "c"), 2, 3, kernel, stride).unwrap();
        let x = random_matrix(&mut r, len, 2, 1.0);
        match (conv_align(&x, &layer, &store), expected) {
            (Ok(y), Some(l)) => prop_assert_eq!(y.shape(), (l, 3)),
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "{:?} vs {:?}", got.map(|m| m.shape()), want),
        }
    }

    #[test]
    fn aligned_pair_shapes_agree_or_fail(lt in 1usize..10, la in 1usize..40, ka in 1usize..6, sa in 1usize..5, seed in 0u64..1000) {
        let conv = ConvConfig { kernel_text: 1, stride_text: 1, kernel_audio: ka, stride_audio: sa, out_channels: 4 };
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(seed);
        let aligner = Aligner::build(&mut ParamBuilder::new(&mut store, &mut r, "a"), 3, 2, &conv, &GruConfig::default()).unwrap();
        let text = random_matrix(&mut r, lt, 3, 1.0);
        let audio = random_matrix(&mut r, la, 2, 1.0);
        let same = out_len(la, ka, sa) == Some(lt);
        match align_pair(&text, &audio, &aligner, &store) {
            Ok(p) => {
                prop_assert!(same);
                prop_assert_eq!(p.x_t.shape(), (lt, 4));
                prop_assert_eq!(p.x_a.shape(), p.x_t.shape());
            }
            Err(_) => prop_assert!(!same),
        }
    }

    #[test]
    fn batches_partition_the_split(n in 1usize..40, bs in 1usize..15, seed in 0u64..500, shuffle in any::<bool>()) {
        let split = generate_synthetic(&small_spec(n, seed)).unwrap();
        let batches = make_batches(&split, bs, shuffle.then_some(seed)).unwrap();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, b) in batches.iter().enumerate() {
            let expected = if i + 1 < batches.len() { bs } else { n - bs * (batches.len() - 1) };
            prop_assert_eq!(b.len(), expected);
            let max_t = *b.text_lengths.iter().max().unwrap();
            for (k, id) in b.ids.iter().enumerate() {
                *seen.entry(id.clone()).or_default() += 1;
                prop_assert_eq!(b.text[k].rows(), max_t);
                for row in b.text_lengths[k]..max_t {
                    prop_assert!(b.text[k].row(row).iter().all(|&v| v == 0.0));
                }
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(seen.values().all(|&c| c == 1));
        for r in &split.records {
            prop_assert!(seen.contains_key(&r.id));
        }
    }

    #[test]
    fn jsonl_round_trip_is_lossless(n in 1usize..12, seed in 0u64..500) {
        let split = generate_synthetic(&small_spec(n, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.jsonl");
        split.save_jsonl(&path).unwrap();
        let back = load_jsonl(&path, SplitRole::Train).unwrap();
        prop_assert_eq!(back.len(), split.len());
        for (a, b) in split.records.iter().zip(&back.records) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert!((a.label - b.label).abs() <= 1e-12);
            prop_assert_eq!(a.text.shape(), b.text.shape());
            prop_assert_eq!(a.audio.shape(), b.audio.shape());
            prop_assert!(a.text.max_abs_diff(&b.text) <= 1e-12);
            prop_assert!(a.audio.max_abs_diff(&b.audio) <= 1e-12);
        }
    }

    #[test]
    fn collaboration_attention_invariants(l in 1usize..7, d in 1usize..6, seed in 0u64..1000, scale in 0.1f64..10.0) {
        let mut r = rng(seed);
        let xt = random_matrix(&mut r, l, d, scale);
        let xa = random_matrix(&mut r, l, d, scale);
        let out = collab_attention(&xt, &xa).unwrap();
        prop_assert_eq!(&out.m_at, &out.m_ta.transpose());
        for s in [&out.s_ta, &out.s_at] {
            for i in 0..l {
                let row = s.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || l == 1 && v == 1.0));
                let hi = row.iter().cloned().fold(f64::MIN, f64::max);
                let lo = row.iter().cloned().fold(f64::MAX, f64::min);
                prop_assert!(hi / lo <= std::f64::consts::E.powi(2) * (1.0 + 1e-12));
            }
        }
        prop_assert_eq!(out.x_tp.shape(), (l, d));
        prop_assert_eq!(out.x_ap.shape(), (l, d));
    }

    #[test]
    fn self_adjust_preserves_shape(l in 1usize..6, heads in 1usize..4, per_head in 1usize..4, n in 1usize..3, ff in 1usize..8, seed in 0u64..500) {
        let d = heads * per_head;
        let cfg = XadjustConfig { blocks_per_stage: n, heads, ff_width: ff, dropout: 0.1, scale_mode: ScaleMode::FullDim };
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(seed);
        let stack = AdjustStack::build(&mut ParamBuilder::new(&mut store, &mut r, "s"), "s", d, &cfg).unwrap();
        perturb(&mut store, &mut r, 0.2);
        let [f, a, b] = [0, 1, 2].map(|_| random_matrix(&mut r, l, d, 1.0));
        let y = self_adjust(&f, &a, &b, &stack, &store).unwrap();
        prop_assert_eq!(y.shape(), (l, d));
        prop_assert!(y.all_finite());
        // evaluation is pure
        prop_assert_eq!(y, self_adjust(&f, &a, &b, &stack, &store).unwrap());
    }

    #[test]
    fn sentiment_classes_stay_in_range(v in -1e6f64..1e6) {
        let c = sentiment_class(v);
        prop_assert!((-3..=3).contains(&c));
    }

    #[test]
    fn joint_loss_is_nonnegative_and_zero_only_at_the_label(a in -4f64..4.0, b in -4f64..4.0, c in -4f64..4.0, y in -3f64..3.0) {
        let p = PredictionTriple { y_tap: a, y_tpa: b, y_ta: c };
        let loss = joint_loss(&p, y);
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, a == y && b == y && c == y);
        prop_assert_eq!(joint_loss(&PredictionTriple { y_tap: y, y_tpa: y, y_ta: y }, y), 0.0);
    }
}
