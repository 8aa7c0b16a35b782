use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use medflowseg::data::{BinaryMask, LabelMap, MaskEncoding};
use medflowseg::dbsa::DbSa;
use medflowseg::fa_attention::{
    from_frequency, tdx_cues, to_frequency, ImagResidue, MultiHeadAttention, NeuralModulator,
    TokenSequence,
};
use medflowseg::losses_training::{ce_loss, dice_loss, one_hot, scalar, soft_dice_loss, total_loss, LossWeights};
use medflowseg::metrics::{dice, hd95, iou};
use medflowseg::params::ParamStore;
use medflowseg::sampling::{staple_fuse, StapleConfig};

const DEV: Device = Device::Cpu;

fn tensor(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &DEV).unwrap()
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn label_map(h: usize, w: usize, k: u8) -> impl Strategy<Value = LabelMap> {
    proptest::collection::vec(0..k, h * w).prop_map(move |d| LabelMap::new(h, w, d).unwrap())
}

fn mask_pair(h: usize, w: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (
        proptest::collection::vec(any::<bool>(), h * w),
        proptest::collection::vec(any::<bool>(), h * w),
    )
        .prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
}

fn shifted(m: &BinaryMask, dy: usize, dx: usize, pad: usize) -> BinaryMask {
    let (h, w) = m.dims();
    let (hh, ww) = (h + pad, w + pad);
    let mut d = vec![false; hh * ww];
    for y in 0..h {
        for x in 0..w {
            d[(y + dy) * ww + x + dx] = m.get(y, x);
        }
    }
    BinaryMask::new(hh, ww, d).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip(labels in label_map(6, 7, 4)) {
        let enc = MaskEncoding::new(4).unwrap();
        let x = enc.encode(&labels, &DEV).unwrap();
        prop_assert_eq!(enc.decode(&x).unwrap(), labels);
    }

    #[test]
    fn decode_tolerates_noise_below_one(
        labels in label_map(5, 5, 3),
        noise in proptest::collection::vec(-0.999f32..0.999, 3 * 25),
    ) {
        let enc = MaskEncoding::new(3).unwrap();
        let x = enc.encode(&labels, &DEV).unwrap();
        let n = Tensor::from_vec(noise, (3, 5, 5), &DEV).unwrap();
        prop_assert_eq!(enc.decode(&(x + n).unwrap()).unwrap(), labels);
    }

    #[test]
    fn metrics_symmetric_and_bounded((a, b) in mask_pair(9, 8)) {
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(j, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn self_comparison_is_perfect((a, _b) in mask_pair(7, 7)) {
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        if !a.is_empty() {
            prop_assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn hd95_translation_invariant((a, b) in mask_pair(8, 8), dy in 0usize..4, dx in 0usize..4) {
        // both masks move together; the padding keeps every pixel inside
        let before = hd95(&a, &b).unwrap();
        let after = hd95(&shifted(&a, dy, dx, 4), &shifted(&b, dy, dx, 4)).unwrap();
        match (before, after) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn staple_is_rater_permutation_invariant(
        raters in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 16), 3),
    ) {
        let masks: Vec<BinaryMask> = raters.iter().map(|r| BinaryMask::new(4, 4, r.clone()).unwrap()).collect();
        let cfg = StapleConfig::default();
        let fwd = staple_fuse(&masks, &cfg).unwrap();
        let rev: Vec<BinaryMask> = masks.iter().rev().cloned().collect();
        let bwd = staple_fuse(&rev, &cfg).unwrap();
        prop_assert_eq!(fwd.fused(), bwd.fused());
        let mut sens = bwd.sensitivity.clone();
        sens.reverse();
        for (x, y) in fwd.sensitivity.iter().zip(&sens) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn staple_unanimous_raters_reproduce_the_mask(r in proptest::collection::vec(any::<bool>(), 16)) {
        let m = BinaryMask::new(4, 4, r).unwrap();
        let res = staple_fuse(&[m.clone(), m.clone(), m.clone()], &StapleConfig::default()).unwrap();
        prop_assert_eq!(res.fused(), &m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soft_dice_and_ce_bounds(
        logits in proptest::collection::vec(-6.0f64..6.0, 2 * 3 * 4 * 4),
        labels in proptest::collection::vec(0u32..3, 2 * 16),
    ) {
        let logits = tensor(&logits, &[2, 3, 4, 4]);
        let labels = Tensor::from_vec(labels, (2, 4, 4), &DEV).unwrap();
        let d = scalar(&dice_loss(&logits, &labels).unwrap()).unwrap();
        let c = scalar(&ce_loss(&logits, &labels).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d), "dice loss {d}");
        prop_assert!(c >= 0.0);
    }

    #[test]
    fn soft_dice_of_exact_one_hot_is_zero(labels in proptest::collection::vec(0u32..3, 16)) {
        let labels = Tensor::from_vec(labels, (1, 4, 4), &DEV).unwrap();
        let oh = one_hot(&labels, 3, DType::F64).unwrap();
        let l = scalar(&soft_dice_loss(&oh, &oh).unwrap()).unwrap();
        prop_assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn total_loss_is_the_weighted_sum(
        v in 0.0f64..5.0, d in 0.0f64..1.0, c in 0.0f64..5.0,
        lambda in 0.0f64..1.0, alpha in 0.0f64..20.0,
    ) {
        let w = LossWeights { lambda, alpha };
        let s = |x: f64| Tensor::new(x, &DEV).unwrap();
        let got = scalar(&total_loss(&s(v), &s(d), &s(c), &w).unwrap()).unwrap();
        prop_assert!((got - (v + lambda * (d + alpha * c))).abs() < 1e-12);
    }

    #[test]
    fn spectral_round_trip(x in proptest::collection::vec(-3.0f64..3.0, 2 * 2 * 6 * 5)) {
        let f = tensor(&x, &[2, 2, 6, 5]);
        let back = from_frequency(&to_frequency(&f).unwrap(), ImagResidue::Check(1e-6)).unwrap();
        prop_assert!(max_abs(&(back - &f).unwrap()) <= 1e-9);
    }

    #[test]
    fn tdx_identities(
        a in proptest::collection::vec(-4.0f64..4.0, 24),
        b in proptest::collection::vec(-4.0f64..4.0, 24),
    ) {
        let ta = tensor(&a, &[1, 6, 4]);
        let tb = tensor(&b, &[1, 6, 4]);
        let ab = tdx_cues(&ta, &tb).unwrap();
        let ba = tdx_cues(&tb, &ta).unwrap();
        prop_assert_eq!(values(&ab.difference), values(&ab.residual.abs().unwrap()));
        prop_assert_eq!(values(&ab.residual), values(&ba.residual.neg().unwrap()));
        prop_assert_eq!(values(&ab.agreement), values(&ba.agreement));
        let same = tdx_cues(&ta, &ta).unwrap();
        prop_assert!(values(&same.difference).iter().all(|&x| x == 0.0));
        prop_assert!(values(&same.residual).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions(
        seed in 0u64..1000,
        q in proptest::collection::vec(-2.0f64..2.0, 5 * 8),
        kv in proptest::collection::vec(-2.0f64..2.0, 7 * 8),
    ) {
        let store = ParamStore::new(seed, DType::F64, &DEV);
        let mha = MultiHeadAttention::new(8, 2, &store.root()).unwrap();
        let (_, w) = mha.forward_with_weights(&tensor(&q, &[1, 5, 8]), &tensor(&kv, &[1, 7, 8])).unwrap();
        let rows = w.sum(3).unwrap();
        prop_assert!(max_abs(&(rows - 1.0).unwrap()) <= 1e-6);
        prop_assert!(values(&w).iter().all(|&x| x >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dbsa_gate_open_interval_and_flat_high_pass(
        seed in 0u64..1000,
        feat in proptest::collection::vec(-3.0f64..3.0, 6 * 8 * 8),
        level in -5.0f64..5.0,
    ) {
        let store = ParamStore::new(seed, DType::F64, &DEV);
        let db = DbSa::new(6, 4, &store.root()).unwrap();
        let g = db.attention_map(&tensor(&feat, &[1, 6, 8, 8])).unwrap();
        prop_assert!(values(&g).iter().all(|&x| x > 0.0 && x < 1.0));
        let flat = (Tensor::ones((1, 4, 8, 8), DType::F64, &DEV).unwrap() * level).unwrap();
        prop_assert!(max_abs(&db.high_pass_residual(&flat).unwrap()) <= 1e-6);
    }

    #[test]
    fn modulation_mask_open_interval(
        seed in 0u64..1000,
        toks in proptest::collection::vec(-2.0f64..2.0, 3 * 4 * 8),
    ) {
        let store = ParamStore::new(seed, DType::F64, &DEV);
        let m = NeuralModulator::new(8, 2, 6, 2, &store.root()).unwrap();
        let seq = |off: usize| TokenSequence {
            tokens: tensor(&toks[off * 32..(off + 1) * 32], &[1, 4, 8]),
            grid: (2, 2),
            patch: 1,
        };
        let t_emb = Tensor::ones((1, 6), DType::F64, &DEV).unwrap();
        let mask = m.forward(&seq(0), &seq(1), &seq(2), &t_emb).unwrap();
        prop_assert!(values(&mask.0).iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
